//! Text and label metrics. Tokenization is lowercase whitespace splitting.

use std::collections::{BTreeSet, HashMap};
use std::hash::Hash;

use crate::error::{Error, Result};

pub fn tokenize(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_lowercase).collect()
}

pub fn lcs_len<A: PartialEq>(a: &[A], b: &[A]) -> usize {
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

/// F1 of the longest common subsequence. Two empty strings score 1.
pub fn rouge_l(prediction: &str, reference: &str) -> f64 {
    rouge_l_tokens(&tokenize(prediction), &tokenize(reference))
}

pub fn rouge_l_tokens<A: PartialEq>(p: &[A], r: &[A]) -> f64 {
    match (p.is_empty(), r.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let l = lcs_len(p, r) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let (prec, rec) = (l / p.len() as f64, l / r.len() as f64);
    2.0 * prec * rec / (prec + rec)
}

fn ngram_counts<A: Eq + Hash>(tokens: &[A], n: usize) -> HashMap<&[A], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Sentence BLEU with uniform weights up to `max_n`. An n-gram order with no
/// clipped matches uses `(0 + 1) / (count + 1)`; no shared unigram at all
/// scores 0.
pub fn bleu_n(prediction: &str, reference: &str, max_n: usize) -> f64 {
    bleu_tokens(&tokenize(prediction), &tokenize(reference), max_n)
}

pub fn bleu(prediction: &str, reference: &str) -> f64 {
    bleu_n(prediction, reference, 4)
}

pub fn bleu_tokens<A: Eq + Hash>(p: &[A], r: &[A], max_n: usize) -> f64 {
    if p.is_empty() || max_n == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let pc = ngram_counts(p, n);
        let rc = ngram_counts(r, n);
        let total: usize = pc.values().sum();
        let matched: usize = pc
            .iter()
            .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
            .sum();
        if n == 1 && matched == 0 {
            return 0.0;
        }
        let prec = if matched == 0 {
            1.0 / (total as f64 + 1.0)
        } else {
            matched as f64 / total as f64
        };
        log_sum += prec.ln();
    }
    let (c, rl) = (p.len() as f64, r.len() as f64);
    let bp = if c > rl { 1.0 } else { (1.0 - rl / c).exp() };
    bp * (log_sum / max_n as f64).exp()
}

/// Set F1. Two empty sets score 1.
pub fn set_f1<A: Ord>(predicted: &BTreeSet<A>, reference: &BTreeSet<A>) -> f64 {
    if predicted.is_empty() && reference.is_empty() {
        return 1.0;
    }
    let inter = predicted.intersection(reference).count() as f64;
    if inter == 0.0 {
        return 0.0;
    }
    let (p, r) = (
        inter / predicted.len() as f64,
        inter / reference.len() as f64,
    );
    2.0 * p * r / (p + r)
}

/// Macro-averaged F1 over every label seen in either column.
pub fn macro_f1<A: Ord + Clone>(pairs: &[(A, A)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::UndefinedMetric("f1 over zero pairs".into()));
    }
    let labels: BTreeSet<&A> = pairs.iter().flat_map(|(p, r)| [p, r]).collect();
    let mut total = 0.0;
    for l in &labels {
        let tp = pairs.iter().filter(|(p, r)| p == *l && r == *l).count() as f64;
        let fp = pairs.iter().filter(|(p, r)| p == *l && r != *l).count() as f64;
        let fn_ = pairs.iter().filter(|(p, r)| p != *l && r == *l).count() as f64;
        total += if tp == 0.0 {
            0.0
        } else {
            2.0 * tp / (2.0 * tp + fp + fn_)
        };
    }
    Ok(total / labels.len() as f64)
}

pub fn accuracy<A: PartialEq>(pairs: &[(A, A)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::UndefinedMetric("accuracy over zero pairs".into()));
    }
    Ok(pairs.iter().filter(|(p, r)| p == r).count() as f64 / pairs.len() as f64)
}

pub fn abstention_rate(abstained: &[bool]) -> Result<f64> {
    if abstained.is_empty() {
        return Err(Error::UndefinedMetric(
            "abstention rate over zero pairs".into(),
        ));
    }
    Ok(abstained.iter().filter(|&&a| a).count() as f64 / abstained.len() as f64)
}

/// Lowercase, collapse whitespace, drop trailing sentence punctuation.
pub fn normalize_answer(s: &str) -> String {
    let joined = tokenize(s).join(" ");
    joined
        .trim_end_matches(['.', '?', '!', ';', ','])
        .to_owned()
}
