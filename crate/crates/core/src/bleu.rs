//! BLEU-4 with clipped n-gram precision and brevity penalty, at corpus and
//! sentence level. Tokens are compared case-sensitively as given.

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct BleuReport {
    /// Modified precisions p_1..p_4.
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    /// In `[0, 100]`.
    pub score: f64,
    pub candidate_len: usize,
    pub reference_len: usize,
}

impl fmt::Display for BleuReport {
    /// Tab-separated: p1..p4, BP, score.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.precisions {
            write!(f, "{p:.6}\t")?;
        }
        write!(f, "{:.6}\t{:.4}", self.brevity_penalty, self.score)
    }
}

impl BleuReport {
    pub const HEADER: &'static str = "p1\tp2\tp3\tp4\tbp\tbleu";
}

#[derive(Clone, Copy, Debug, Default)]
struct Counts {
    matches: [usize; MAX_ORDER],
    totals: [usize; MAX_ORDER],
    cand_len: usize,
    ref_len: usize,
}

fn ngrams<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut map = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *map.entry(w.iter().map(|s| s.as_ref()).collect()).or_insert(0) += 1;
        }
    }
    map
}

fn sentence_counts<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> Counts {
    let mut c = Counts { cand_len: candidate.len(), ref_len: reference.len(), ..Default::default() };
    for n in 1..=MAX_ORDER {
        let cand = ngrams(candidate, n);
        let refs = ngrams(reference, n);
        c.totals[n - 1] = candidate.len().saturating_sub(n - 1);
        c.matches[n - 1] = cand.iter().map(|(g, &k)| k.min(refs.get(g).copied().unwrap_or(0))).sum();
    }
    c
}

fn brevity_penalty(cand_len: usize, ref_len: usize) -> f64 {
    if cand_len == 0 {
        0.0
    } else if cand_len <= ref_len {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    } else {
        1.0
    }
}

fn report(precisions: [f64; MAX_ORDER], cand_len: usize, ref_len: usize) -> BleuReport {
    let bp = brevity_penalty(cand_len, ref_len);
    let score = if precisions.iter().all(|&p| p > 0.0) {
        let mean_log = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
        (bp * mean_log.exp() * 100.0).clamp(0.0, 100.0)
    } else {
        0.0
    };
    BleuReport { precisions, brevity_penalty: bp, score, candidate_len: cand_len, reference_len: ref_len }
}

/// Corpus-level BLEU-4 with one reference per candidate.
pub fn corpus_bleu4<S: AsRef<str>>(candidates: &[Vec<S>], references: &[Vec<S>]) -> Result<BleuReport> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("BLEU of an empty corpus".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::InvalidArgument(format!(
            "{} candidates but {} references",
            candidates.len(),
            references.len()
        )));
    }
    let mut total = Counts::default();
    for (c, r) in candidates.iter().zip(references) {
        let s = sentence_counts(c, r);
        for n in 0..MAX_ORDER {
            total.matches[n] += s.matches[n];
            total.totals[n] += s.totals[n];
        }
        total.cand_len += s.cand_len;
        total.ref_len += s.ref_len;
    }
    let p = std::array::from_fn(|n| {
        if total.totals[n] == 0 {
            0.0
        } else {
            total.matches[n] as f64 / total.totals[n] as f64
        }
    });
    Ok(report(p, total.cand_len, total.ref_len))
}

/// Sentence-level BLEU-4; orders n ≥ 2 use add-one smoothing
/// `(m_n + 1) / (c_n + 1)`.
pub fn sentence_bleu4<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> BleuReport {
    let c = sentence_counts(candidate, reference);
    let p = std::array::from_fn(|n| match n {
        0 if c.totals[0] == 0 => 0.0,
        0 => c.matches[0] as f64 / c.totals[0] as f64,
        _ => (c.matches[n] + 1) as f64 / (c.totals[n] + 1) as f64,
    });
    report(p, c.cand_len, c.ref_len)
}

/// Splits on whitespace.
pub fn tokenize(line: &str) -> Vec<String> {
    line.split_whitespace().map(String::from).collect()
}
