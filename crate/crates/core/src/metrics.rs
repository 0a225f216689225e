//! Caption metrics: BLEU-4, METEOR (exact matching only), ROUGE-L, CIDEr-D
//! and the combined leaderboard score.
//!
//! All metrics tokenize by lowercasing and splitting on whitespace.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::lm::tokenize;

pub const ROUGE_BETA: f64 = 1.2;
pub const CIDER_SIGMA: f64 = 6.0;

/// A candidate caption and its references.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalPair {
    pub id: String,
    pub candidate: String,
    pub references: Vec<String>,
}

impl EvalPair {
    pub fn new(id: impl Into<String>, candidate: impl Into<String>, reference: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            candidate: candidate.into(),
            references: vec![reference.into()],
        }
    }
}

struct Tokenized {
    candidate: Vec<String>,
    references: Vec<Vec<String>>,
}

fn tokenized(pairs: &[EvalPair]) -> Result<Vec<Tokenized>> {
    if pairs.is_empty() {
        return Err(Error::invalid("metrics need at least one pair"));
    }
    pairs
        .iter()
        .map(|p| {
            if p.references.is_empty() {
                return Err(Error::invalid(format!("pair `{}` has no reference", p.id)));
            }
            Ok(Tokenized {
                candidate: tokenize(&p.candidate),
                references: p.references.iter().map(|r| tokenize(r)).collect(),
            })
        })
        .collect()
}

/// Ordered so floating-point sums over n-grams are reproducible.
fn ngrams(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

#[derive(Default, Clone, Copy)]
struct BleuStats {
    matches: [usize; 4],
    totals: [usize; 4],
    cand_len: usize,
    ref_len: usize,
}

fn bleu_stats(t: &Tokenized) -> BleuStats {
    let mut s = BleuStats {
        cand_len: t.candidate.len(),
        ..BleuStats::default()
    };
    // Closest reference length, shorter one on ties.
    s.ref_len = t
        .references
        .iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(s.cand_len), r))
        .unwrap_or(0);
    for n in 1..=4 {
        let cand = ngrams(&t.candidate, n);
        let mut max_ref: HashMap<&[String], usize> = HashMap::new();
        for r in &t.references {
            for (g, c) in ngrams(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        s.totals[n - 1] = cand.values().sum();
        s.matches[n - 1] = cand
            .iter()
            .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
            .sum();
    }
    s
}

fn bleu_from(s: &BleuStats) -> f64 {
    if s.cand_len == 0 || s.matches.contains(&0) {
        return 0.0;
    }
    let log_p: f64 = (0..4)
        .map(|i| (s.matches[i] as f64 / s.totals[i] as f64).ln())
        .sum::<f64>()
        / 4.0;
    let bp = if s.cand_len > s.ref_len {
        1.0
    } else {
        (1.0 - s.ref_len as f64 / s.cand_len as f64).exp()
    };
    bp * log_p.exp()
}

/// Corpus-level BLEU-4 without smoothing.
pub fn bleu4(pairs: &[EvalPair]) -> Result<f64> {
    let mut total = BleuStats::default();
    for t in tokenized(pairs)? {
        let s = bleu_stats(&t);
        for i in 0..4 {
            total.matches[i] += s.matches[i];
            total.totals[i] += s.totals[i];
        }
        total.cand_len += s.cand_len;
        total.ref_len += s.ref_len;
    }
    Ok(bleu_from(&total))
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

fn rouge_pair(t: &Tokenized) -> f64 {
    let b2 = ROUGE_BETA * ROUGE_BETA;
    t.references
        .iter()
        .map(|r| {
            let l = lcs(&t.candidate, r) as f64;
            if l == 0.0 {
                return 0.0;
            }
            let p = l / t.candidate.len() as f64;
            let rec = l / r.len() as f64;
            (1.0 + b2) * p * rec / (rec + b2 * p)
        })
        .fold(0.0, f64::max)
}

/// Mean sentence ROUGE-L (F-measure with beta = 1.2, best reference).
pub fn rouge_l(pairs: &[EvalPair]) -> Result<f64> {
    let t = tokenized(pairs)?;
    Ok(t.iter().map(rouge_pair).sum::<f64>() / t.len() as f64)
}

/// Exact-match unigram alignment built from longest common runs first.
/// Returns (matches, chunks).
fn align(cand: &[String], reference: &[String]) -> (usize, usize) {
    let mut used_c = vec![false; cand.len()];
    let mut used_r = vec![false; reference.len()];
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    loop {
        let mut best: Option<(usize, usize, usize)> = None;
        for i in 0..cand.len() {
            for j in 0..reference.len() {
                let mut len = 0;
                while i + len < cand.len()
                    && j + len < reference.len()
                    && !used_c[i + len]
                    && !used_r[j + len]
                    && cand[i + len] == reference[j + len]
                {
                    len += 1;
                }
                if len > best.map_or(0, |b| b.2) {
                    best = Some((i, j, len));
                }
            }
        }
        let Some((i, j, len)) = best else { break };
        for k in 0..len {
            used_c[i + k] = true;
            used_r[j + k] = true;
            pairs.push((i + k, j + k));
        }
    }
    pairs.sort_unstable();
    let chunks = pairs
        .iter()
        .enumerate()
        .filter(|&(k, &(i, j))| k == 0 || pairs[k - 1] != (i - 1, j.wrapping_sub(1)))
        .count();
    (pairs.len(), chunks)
}

fn meteor_pair(t: &Tokenized) -> f64 {
    t.references
        .iter()
        .map(|r| {
            let (m, chunks) = align(&t.candidate, r);
            if m == 0 {
                return 0.0;
            }
            let p = m as f64 / t.candidate.len() as f64;
            let rec = m as f64 / r.len() as f64;
            let f_mean = 10.0 * p * rec / (rec + 9.0 * p);
            let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
            f_mean * (1.0 - penalty)
        })
        .fold(0.0, f64::max)
}

/// Mean sentence METEOR with exact matching only (no stems or synonyms).
pub fn meteor(pairs: &[EvalPair]) -> Result<f64> {
    let t = tokenized(pairs)?;
    Ok(t.iter().map(meteor_pair).sum::<f64>() / t.len() as f64)
}

struct CiderVec {
    weights: [BTreeMap<Vec<String>, f64>; 4],
    norms: [f64; 4],
    len: usize,
}

fn cider_vec(tokens: &[String], df: &HashMap<Vec<String>, usize>, log_n: f64) -> CiderVec {
    let mut weights: [BTreeMap<Vec<String>, f64>; 4] = Default::default();
    let mut norms = [0.0; 4];
    for n in 1..=4 {
        for (g, c) in ngrams(tokens, n) {
            let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
            let w = c as f64 * (log_n - d.ln());
            norms[n - 1] += w * w;
            weights[n - 1].insert(g.to_vec(), w);
        }
        norms[n - 1] = norms[n - 1].sqrt();
    }
    CiderVec {
        weights,
        norms,
        len: tokens.len(),
    }
}

fn cider_sim(h: &CiderVec, r: &CiderVec) -> f64 {
    let delta = h.len as f64 - r.len as f64;
    let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
    (0..4)
        .map(|n| {
            let dot: f64 = h.weights[n]
                .iter()
                .filter_map(|(g, &wh)| r.weights[n].get(g).map(|&wr| wh.min(wr) * wr))
                .sum();
            if h.norms[n] == 0.0 || r.norms[n] == 0.0 {
                0.0
            } else {
                dot / (h.norms[n] * r.norms[n]) * penalty
            }
        })
        .sum::<f64>()
        / 4.0
}

/// Per-pair CIDEr-D scores (each in [0, 10]).
pub fn cider_d_scores(pairs: &[EvalPair]) -> Result<Vec<f64>> {
    let t = tokenized(pairs)?;
    if t.len() < 2 {
        return Err(Error::invalid("CIDEr-D needs at least two pairs for document frequencies"));
    }
    let mut df: HashMap<Vec<String>, usize> = HashMap::new();
    for pair in &t {
        let mut seen: BTreeSet<&[String]> = BTreeSet::new();
        for r in &pair.references {
            for n in 1..=4 {
                seen.extend(ngrams(r, n).into_keys());
            }
        }
        for g in seen {
            *df.entry(g.to_vec()).or_insert(0) += 1;
        }
    }
    let log_n = (t.len() as f64).ln();
    Ok(t.iter()
        .map(|pair| {
            let h = cider_vec(&pair.candidate, &df, log_n);
            let total: f64 = pair
                .references
                .iter()
                .map(|r| cider_sim(&h, &cider_vec(r, &df, log_n)))
                .sum();
            10.0 * total / pair.references.len() as f64
        })
        .collect())
}

/// Mean CIDEr-D over the corpus.
pub fn cider_d(pairs: &[EvalPair]) -> Result<f64> {
    let s = cider_d_scores(pairs)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

/// `(BLEU-4 + METEOR + ROUGE-L + 0.1 * CIDEr) / 4 * 100`
pub fn combined_score(bleu4: f64, meteor: f64, rouge_l: f64, cider_d: f64) -> f64 {
    (bleu4 + meteor + rouge_l + 0.1 * cider_d) / 4.0 * 100.0
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleScores {
    pub id: String,
    pub bleu4: f64,
    pub meteor: f64,
    pub rouge_l: f64,
    pub cider_d: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusScores {
    pub bleu4: f64,
    pub meteor: f64,
    pub rouge_l: f64,
    pub cider_d: f64,
    pub score_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub per_sample: Vec<SampleScores>,
    pub corpus: CorpusScores,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Every metric per pair and over the corpus. Needs at least two pairs.
pub fn evaluate(pairs: &[EvalPair]) -> Result<MetricsReport> {
    let t = tokenized(pairs)?;
    let cider = cider_d_scores(pairs)?;
    let per_sample = pairs
        .iter()
        .zip(&t)
        .zip(&cider)
        .map(|((p, tok), &c)| SampleScores {
            id: p.id.clone(),
            bleu4: bleu_from(&bleu_stats(tok)),
            meteor: meteor_pair(tok),
            rouge_l: rouge_pair(tok),
            cider_d: c,
        })
        .collect();
    let (b, m, r, c) = (bleu4(pairs)?, meteor(pairs)?, rouge_l(pairs)?, cider.iter().sum::<f64>() / cider.len() as f64);
    Ok(MetricsReport {
        per_sample,
        corpus: CorpusScores {
            bleu4: b,
            meteor: m,
            rouge_l: r,
            cider_d: c,
            score_s: combined_score(b, m, r, c),
        },
    })
}
