//! BLEU-n and CIDEr, implemented from scratch.
//!
//! Tokenization is lowercase, punctuation stripped, split on whitespace, and
//! is applied identically to hypotheses and references.
//!
//! BLEU has no smoothing by default: any zero n-gram precision makes the
//! score 0. [`Smoothing::AddOne`] adds one to the matched and total counts
//! of orders n >= 2.
//!
//! CIDEr here is plain CIDEr (no length penalty, no count clipping):
//! per order n = 1..4 each sentence becomes a TF-IDF vector with
//! `tf = count / total` and `idf = ln(corpus_size / max(1, df))`; the score
//! is the cosine similarity to each reference, averaged over references and
//! orders, times 10. A cosine with an all-zero vector counts as 0.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::{math, Error, Result};

pub const CIDER_MAX_N: usize = 4;

/// Lowercase, drop punctuation, split on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect();
    cleaned.split_whitespace().map(String::from).collect()
}

/// Counts of the order-`n` n-grams of a sentence, keyed by the
/// space-joined n-gram.
pub fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for window in tokens.windows(n) {
        let mut key = String::new();
        for (i, t) in window.iter().enumerate() {
            if i > 0 {
                key.push(' ');
            }
            key.push_str(t.as_ref());
        }
        *counts.entry(key).or_insert(0) += 1;
    }
    counts
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Smoothing {
    #[default]
    None,
    AddOne,
}

/// Clipped n-gram matches and total hypothesis n-grams for order `n`.
pub fn modified_precision<S: AsRef<str>, R: AsRef<str>>(hyp: &[S], refs: &[Vec<R>], n: usize) -> (usize, usize) {
    let hyp_counts = ngram_counts(hyp, n);
    let mut max_ref: BTreeMap<String, usize> = BTreeMap::new();
    for r in refs {
        for (g, c) in ngram_counts(r, n) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let total = hyp_counts.values().sum();
    let matched = hyp_counts
        .iter()
        .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, total)
}

/// Reference length closest to `hyp_len`; ties go to the shorter one.
fn closest_ref_len<R>(hyp_len: usize, refs: &[Vec<R>]) -> usize {
    refs.iter()
        .map(|r| r.len())
        .min_by_key(|&l| (l.abs_diff(hyp_len), l))
        .unwrap_or(0)
}

fn combine(matches: &[(usize, usize)], hyp_len: usize, ref_len: usize, smoothing: Smoothing) -> f64 {
    if hyp_len == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for (i, &(m, t)) in matches.iter().enumerate() {
        let (m, t) = match smoothing {
            Smoothing::AddOne if i > 0 => (m + 1, t + 1),
            _ => (m, t),
        };
        if m == 0 || t == 0 {
            return 0.0;
        }
        log_sum += math::ln(m as f64 / t as f64);
    }
    let geo = math::exp(log_sum / matches.len() as f64);
    let bp = if hyp_len < ref_len { math::exp(1.0 - ref_len as f64 / hyp_len as f64) } else { 1.0 };
    bp * geo
}

/// Sentence-level BLEU with orders `1..=max_n`.
pub fn bleu<S: AsRef<str>, R: AsRef<str>>(hyp: &[S], refs: &[Vec<R>], max_n: usize, smoothing: Smoothing) -> Result<f64> {
    if refs.is_empty() {
        return Err(Error::EmptyReferences);
    }
    if hyp.is_empty() {
        return Err(Error::EmptyHypothesis);
    }
    let matches: Vec<(usize, usize)> = (1..=max_n.max(1)).map(|n| modified_precision(hyp, refs, n)).collect();
    Ok(combine(&matches, hyp.len(), closest_ref_len(hyp.len(), refs), smoothing))
}

/// Corpus-level BLEU: clipped counts and lengths are summed over all
/// segments before combining.
pub fn corpus_bleu<S: AsRef<str>, R: AsRef<str>>(
    hyps: &[Vec<S>],
    refs: &[Vec<Vec<R>>],
    max_n: usize,
    smoothing: Smoothing,
) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::Config(alloc::format!("{} hypotheses but {} reference sets", hyps.len(), refs.len())));
    }
    if refs.iter().any(Vec::is_empty) || refs.is_empty() {
        return Err(Error::EmptyReferences);
    }
    let max_n = max_n.max(1);
    let mut matches = alloc::vec![(0usize, 0usize); max_n];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hyps.iter().zip(refs) {
        for (n, acc) in matches.iter_mut().enumerate() {
            let (m, t) = modified_precision(h, r, n + 1);
            acc.0 += m;
            acc.1 += t;
        }
        hyp_len += h.len();
        ref_len += closest_ref_len(h.len(), r);
    }
    Ok(combine(&matches, hyp_len, ref_len, smoothing))
}

/// Document frequencies of n-grams (orders 1..=4) over a reference corpus.
///
/// Each document is the set of reference sentences of one image; an n-gram
/// counts once per document however often it occurs there.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NGramStats {
    df: [BTreeMap<String, usize>; CIDER_MAX_N],
    corpus_size: usize,
}

impl NGramStats {
    pub fn corpus_size(&self) -> usize {
        self.corpus_size
    }

    pub fn document_frequency(&self, ngram: &str, n: usize) -> usize {
        self.df.get(n.wrapping_sub(1)).and_then(|m| m.get(ngram)).copied().unwrap_or(0)
    }

    pub fn idf(&self, ngram: &str, n: usize) -> f64 {
        let df = self.document_frequency(ngram, n).max(1);
        math::ln(self.corpus_size as f64 / df as f64)
    }

    fn tfidf<S: AsRef<str>>(&self, tokens: &[S], n: usize) -> BTreeMap<String, f64> {
        let counts = ngram_counts(tokens, n);
        let total: usize = counts.values().sum();
        counts
            .into_iter()
            .map(|(g, c)| {
                let w = (c as f64 / total as f64) * self.idf(&g, n);
                (g, w)
            })
            .collect()
    }
}

pub fn build_idf<S: AsRef<str>>(corpus: &[Vec<Vec<S>>]) -> Result<NGramStats> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut df: [BTreeMap<String, usize>; CIDER_MAX_N] = Default::default();
    for doc in corpus {
        for (n, table) in df.iter_mut().enumerate() {
            let mut seen: BTreeMap<String, ()> = BTreeMap::new();
            for sentence in doc {
                for g in ngram_counts(sentence, n + 1).into_keys() {
                    seen.insert(g, ());
                }
            }
            for g in seen.into_keys() {
                *table.entry(g).or_insert(0) += 1;
            }
        }
    }
    Ok(NGramStats { df, corpus_size: corpus.len() })
}

/// Treats each sentence as its own document.
pub fn build_idf_from_sentences<S: AsRef<str>>(sentences: &[Vec<S>]) -> Result<NGramStats> {
    let corpus: Vec<Vec<Vec<&str>>> =
        sentences.iter().map(|s| alloc::vec![s.iter().map(AsRef::as_ref).collect()]).collect();
    build_idf(&corpus)
}

fn cosine(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> f64 {
    let na = math::sqrt(a.values().map(|v| v * v).sum());
    let nb = math::sqrt(b.values().map(|v| v * v).sum());
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().filter_map(|(g, v)| b.get(g).map(|w| v * w)).sum();
    (dot / (na * nb)).clamp(0.0, 1.0)
}

/// CIDEr of one hypothesis against its references, in `[0, 10]`.
pub fn cider<S: AsRef<str>, R: AsRef<str>>(hyp: &[S], refs: &[Vec<R>], stats: &NGramStats) -> Result<f64> {
    if refs.is_empty() {
        return Err(Error::EmptyReferences);
    }
    let mut total = 0.0;
    for n in 1..=CIDER_MAX_N {
        let h = stats.tfidf(hyp, n);
        let per_ref: f64 = refs.iter().map(|r| cosine(&h, &stats.tfidf(r, n))).sum();
        total += per_ref / refs.len() as f64;
    }
    Ok(10.0 * total / CIDER_MAX_N as f64)
}
