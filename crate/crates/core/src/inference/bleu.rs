//! Corpus-level BLEU with clipped n-gram precision and brevity penalty.

use std::collections::HashMap;
use std::hash::Hash;
use std::path::Path;

use serde::Serialize;

use crate::error::{Result, SmdtError};

pub const MAX_ORDER: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BleuReport {
    /// Percentage in `[0, 100]`.
    pub bleu: f64,
    pub precisions: [f64; MAX_ORDER],
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
    pub smoothed: bool,
    pub tokenization: &'static str,
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Pools clipped n-gram matches over all sentence pairs before taking
/// precisions. With `smooth`, orders 2..4 use `(m + 1) / (t + 1)`.
pub fn bleu<T: Eq + Hash>(hypotheses: &[Vec<T>], references: &[Vec<T>], smooth: bool) -> Result<BleuReport> {
    if references.is_empty() {
        return Err(SmdtError::InvalidArgument("empty reference set".into()));
    }
    if hypotheses.len() != references.len() {
        return Err(SmdtError::InvalidArgument(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hypotheses.iter().zip(references) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=MAX_ORDER {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(r, n);
            totals[n - 1] += h.len().saturating_sub(n - 1);
            matches[n - 1] += hc
                .iter()
                .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }
    let mut precisions = [0.0; MAX_ORDER];
    for n in 0..MAX_ORDER {
        precisions[n] = if smooth && n > 0 {
            (matches[n] + 1) as f64 / (totals[n] + 1) as f64
        } else if totals[n] == 0 {
            0.0
        } else {
            matches[n] as f64 / totals[n] as f64
        };
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    let bleu = if precisions.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
        100.0 * brevity_penalty * log_mean.exp()
    };
    Ok(BleuReport {
        bleu,
        precisions,
        matches,
        totals,
        brevity_penalty,
        hyp_len,
        ref_len,
        smoothed: smooth,
        tokenization: "whitespace",
    })
}

/// Whitespace-tokenised BLEU over line-aligned texts.
pub fn bleu_lines(hyp_text: &str, ref_text: &str, smooth: bool) -> Result<BleuReport> {
    let hyps: Vec<&str> = hyp_text.lines().collect();
    let refs: Vec<&str> = ref_text.lines().collect();
    if hyps.len() != refs.len() {
        return Err(SmdtError::InvalidArgument(format!(
            "line-count mismatch: {} hypothesis lines vs {} reference lines",
            hyps.len(),
            refs.len()
        )));
    }
    let split = |lines: &[&str]| -> Vec<Vec<String>> {
        lines
            .iter()
            .map(|l| l.split_whitespace().map(str::to_string).collect())
            .collect()
    };
    bleu(&split(&hyps), &split(&refs), smooth)
}

pub fn score_run(hyp_file: &Path, ref_file: &Path, smooth: bool) -> Result<BleuReport> {
    let hyp = std::fs::read_to_string(hyp_file)?;
    let refs = std::fs::read_to_string(ref_file)?;
    bleu_lines(&hyp, &refs, smooth)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn identical_corpus_scores_100() {
        let c = vec![toks("a b c d e"), toks("the cat sat on the mat")];
        let r = bleu(&c, &c, false).unwrap();
        assert!((r.bleu - 100.0).abs() < 1e-12);
        assert_eq!(r.brevity_penalty, 1.0);
    }

    #[test]
    fn clipped_unigram_precision() {
        let r = bleu(&[toks("the the the the")], &[toks("the cat")], false).unwrap();
        assert_eq!(r.precisions[0], 0.25);
        assert_eq!(r.bleu, 0.0);
    }

    #[test]
    fn no_four_gram_overlap_is_zero() {
        let r = bleu(&[toks("a b c x e f g")], &[toks("a b c d e f g")], false).unwrap();
        assert_eq!(r.matches[3], 0);
        assert_eq!(r.bleu, 0.0);
        assert!(bleu(&[toks("a b c x e f g")], &[toks("a b c d e f g")], true).unwrap().bleu > 0.0);
    }

    #[test]
    fn short_hypothesis_is_penalised() {
        let r = bleu(&[toks("a b c d")], &[toks("a b c d e f")], false).unwrap();
        assert!((r.brevity_penalty - (1.0f64 - 1.5).exp()).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        let empty: Vec<Vec<&str>> = Vec::new();
        assert!(bleu(&empty, &empty, false).is_err());
        assert!(bleu(&[toks("a")], &[toks("a"), toks("b")], false).is_err());
        assert!(bleu_lines("a\nb\n", "a\n", false).is_err());
    }
}
