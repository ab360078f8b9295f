//! Translation quality metrics: exact match, token-level Levenshtein
//! statistics, corpus BLEU, and perplexity.

use crate::tokenizer::TokenStream;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Aggregate metric values for one evaluation run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub em: f64,
    pub ld_avg: f64,
    pub ld_leq5: f64,
    pub bleu: f64,
    pub count: usize,
}

/// True iff the streams have equal length and tokenwise equal text.
pub fn exact_match(pred: &TokenStream, reference: &TokenStream) -> bool {
    pred.len() == reference.len()
        && pred
            .tokens
            .iter()
            .zip(&reference.tokens)
            .all(|(a, b)| a.text == b.text)
}

/// Unweighted share of exact matches.
pub fn em_accuracy(pairs: &[(TokenStream, TokenStream)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::UndefinedMetric);
    }
    let matches = pairs.iter().filter(|(p, r)| exact_match(p, r)).count();
    Ok(matches as f64 / pairs.len() as f64)
}

/// Minimum number of insertions, deletions, and substitutions turning
/// one token list into the other. Two-row dynamic programming with
/// O(min(|a|,|b|)) memory.
pub fn levenshtein(a: &TokenStream, b: &TokenStream) -> usize {
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    if short.is_empty() {
        return long.len();
    }
    let mut row: Vec<usize> = (0..=short.len()).collect();
    for (i, long_tok) in long.tokens.iter().enumerate() {
        let mut diagonal = row[0];
        row[0] = i + 1;
        for (j, short_tok) in short.tokens.iter().enumerate() {
            let cost = usize::from(long_tok.text != short_tok.text);
            let next = (row[j] + 1).min(row[j + 1] + 1).min(diagonal + cost);
            diagonal = row[j + 1];
            row[j + 1] = next;
        }
    }
    row[short.len()]
}

/// Mean Levenshtein distance and the fraction of pairs with distance
/// at most `threshold`.
pub fn ld_stats(pairs: &[(TokenStream, TokenStream)], threshold: usize) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::UndefinedMetric);
    }
    let distances: Vec<usize> = pairs.iter().map(|(p, r)| levenshtein(p, r)).collect();
    let avg = distances.iter().sum::<usize>() as f64 / distances.len() as f64;
    let leq = distances.iter().filter(|&&d| d <= threshold).count() as f64 / distances.len() as f64;
    Ok((avg, leq))
}

fn ngram_counts(tokens: &[&str], n: usize) -> HashMap<Vec<String>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            let key: Vec<String> = window.iter().map(|s| s.to_string()).collect();
            *counts.entry(key).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU over n in 1..=4: geometric mean of pooled modified
/// n-gram precisions times the brevity penalty, scaled to [0, 100].
/// Any zero pooled precision yields 0.
pub fn bleu(predictions: &[TokenStream], references: &[TokenStream]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != references.len() {
        return Err(Error::UndefinedMetric);
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let mut pred_len = 0usize;
    let mut ref_len = 0usize;
    for (pred, reference) in predictions.iter().zip(references) {
        let p: Vec<&str> = pred.texts();
        let r: Vec<&str> = reference.texts();
        pred_len += p.len();
        ref_len += r.len();
        for n in 1..=4 {
            let pc = ngram_counts(&p, n);
            let rc = ngram_counts(&r, n);
            for (gram, count) in &pc {
                total[n - 1] += count;
                matched[n - 1] += count.min(rc.get(gram).unwrap_or(&0));
            }
        }
    }
    if pred_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..4 {
        if matched[n] == 0 || total[n] == 0 {
            return Ok(0.0);
        }
        log_sum += (matched[n] as f64 / total[n] as f64).ln();
    }
    let bp = if pred_len < ref_len {
        (1.0 - ref_len as f64 / pred_len as f64).exp()
    } else {
        1.0
    };
    Ok(100.0 * bp * (log_sum / 4.0).exp())
}

/// Perplexity base 2: `2^H` with `H` the mean over non-PAD positions of
/// `-log2 p(reference token)`. A zero-probability reference yields
/// positive infinity.
pub fn perplexity(distributions: &[Vec<f64>], reference_ids: &[usize], pad_id: usize) -> Result<f64> {
    if distributions.len() != reference_ids.len() {
        return Err(Error::Other(
            "one distribution per reference position required".into(),
        ));
    }
    let mut bits = 0.0f64;
    let mut positions = 0usize;
    for (dist, &id) in distributions.iter().zip(reference_ids) {
        if id == pad_id {
            continue;
        }
        let p = *dist.get(id).ok_or(Error::IdOutOfRange {
            id,
            size: dist.len(),
        })?;
        if p <= 0.0 {
            return Ok(f64::INFINITY);
        }
        bits -= p.log2();
        positions += 1;
    }
    if positions == 0 {
        return Err(Error::UndefinedMetric);
    }
    Ok((bits / positions as f64).exp2())
}
