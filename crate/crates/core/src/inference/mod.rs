//! Sentence-by-sentence beam search over a document, and corpus BLEU.

mod bleu;

pub use bleu::{bleu, bleu_lines, score_run, BleuReport, MAX_ORDER};

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Document, TokenId, BOS, EOS, PAD, RS, RT, SEP};
use crate::error::{Result, SmdtError};
use crate::layout::{build_decoder_masks, build_encoder_masks, InstanceLayout};
use crate::model::{Memory, Model, Probes, SelectionResult, Session};
use crate::numerics::Graph;
use crate::parallel::Execution;
use crate::retrieval::{Query, RetrievedPair, TmIndex};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub beam: usize,
    /// Content tokens per sentence are capped at `factor · |source| + 5`.
    pub max_len_factor: f64,
    /// Hypotheses are ranked by `log_prob / len^length_penalty`.
    pub length_penalty: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam: 5,
            max_len_factor: 1.5,
            length_penalty: 0.6,
        }
    }
}

impl DecodeConfig {
    pub fn greedy() -> Self {
        DecodeConfig {
            beam: 1,
            ..DecodeConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 {
            return Err(SmdtError::Config("beam must be at least 1".into()));
        }
        if !(self.max_len_factor >= 0.0 && self.max_len_factor.is_finite()) {
            return Err(SmdtError::Config("max_len_factor must be finite and non-negative".into()));
        }
        if !(self.length_penalty >= 0.0 && self.length_penalty.is_finite()) {
            return Err(SmdtError::Config("length_penalty must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn max_len(&self, source_len: usize) -> usize {
        (self.max_len_factor * source_len as f64).floor() as usize + 5
    }
}

/// A (partial) document translation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Hypothesis {
    /// Tokens per started sentence; finished sentences end with EOS.
    pub sentences: Vec<Vec<TokenId>>,
    pub log_prob: f64,
    pub finished: Vec<bool>,
}

impl Hypothesis {
    /// Finished sentences without their EOS.
    pub fn outputs(&self) -> Vec<Vec<TokenId>> {
        self.sentences
            .iter()
            .map(|s| s.strip_suffix(&[EOS]).unwrap_or(s).to_vec())
            .collect()
    }
}

/// The decoded document with the selection decisions that shaped it.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Translation {
    pub hypothesis: Hypothesis,
    pub selection: SelectionResult,
}

/// Tokens that never appear in an output sentence.
fn is_emittable(token: TokenId) -> bool {
    !matches!(token, PAD | BOS | SEP | RS | RT)
}

/// Scores under length normalization; `len` counts EOS.
pub fn normalized_score(log_prob: f64, len: usize, length_penalty: f64) -> f64 {
    log_prob / (len.max(1) as f64).powf(length_penalty)
}

/// Decoder context shared by every step of one document.
struct Decoder<'a> {
    model: &'a Model,
    layout: &'a InstanceLayout,
    enc_graph: &'a Graph,
    memory: &'a Memory,
    probes: &'a Probes,
}

impl Decoder<'_> {
    /// Log-probabilities of the next token of sentence `prev.len()` after
    /// `prefix`, given the finished outputs `prev`.
    fn next_log_probs(&self, prev: &[Vec<TokenId>], prefix: &[TokenId]) -> Result<Vec<f64>> {
        let mut inputs = Vec::new();
        let mut lengths = Vec::new();
        for y in prev.iter().map(Vec::as_slice).chain([prefix]) {
            inputs.push(BOS);
            inputs.extend_from_slice(y);
            lengths.push(y.len() + 1);
        }
        let masks = build_decoder_masks(self.layout, &lengths)?;
        let mut g = Graph::eval();
        let memory = self.memory.transfer(self.enc_graph, &mut g);
        let mut s = Session::new(self.model, &mut g, false);
        let logits = s.decode(&memory, self.layout, &inputs, &masks, self.probes)?;
        let row = g.value(logits).row(inputs.len() - 1);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_z = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        Ok(row.iter().map(|v| v - log_z).collect())
    }

    /// The `k` best emittable continuations, ties to the lower id. Only EOS
    /// is allowed once the prefix reaches `max_len`.
    fn expand(&self, prev: &[Vec<TokenId>], prefix: &[TokenId], k: usize, max_len: usize) -> Result<Vec<(TokenId, f64)>> {
        let lp = self.next_log_probs(prev, prefix)?;
        if prefix.len() >= max_len {
            return Ok(vec![(EOS, lp[EOS as usize])]);
        }
        let mut ranked: Vec<(TokenId, f64)> = lp
            .iter()
            .enumerate()
            .map(|(i, &v)| (i as TokenId, v))
            .filter(|&(t, _)| is_emittable(t))
            .collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(k);
        Ok(ranked)
    }

    /// Beam search for one sentence. Returns tokens ending with EOS and
    /// their log-probability.
    fn beam_search(&self, prev: &[Vec<TokenId>], max_len: usize, config: &DecodeConfig) -> Result<(Vec<TokenId>, f64)> {
        let k = config.beam;
        let mut active: Vec<(Vec<TokenId>, f64)> = vec![(Vec::new(), 0.0)];
        let mut finished: Vec<(Vec<TokenId>, f64)> = Vec::new();
        while !active.is_empty() && finished.len() < k {
            let mut candidates = Vec::new();
            for (tokens, lp) in &active {
                for (t, step) in self.expand(prev, tokens, k, max_len)? {
                    let mut next = tokens.clone();
                    next.push(t);
                    candidates.push((next, lp + step));
                }
            }
            candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            candidates.truncate(k);
            active.clear();
            for c in candidates {
                if c.0.last() == Some(&EOS) {
                    finished.push(c);
                } else {
                    active.push(c);
                }
            }
        }
        if k > 1 {
            finished.push(self.beam_search(prev, max_len, &DecodeConfig { beam: 1, ..*config })?);
        }
        let score = |c: &(Vec<TokenId>, f64)| normalized_score(c.1, c.0.len(), config.length_penalty);
        let mut best = 0;
        for (i, c) in finished.iter().enumerate() {
            if score(c) > score(&finished[best]) {
                best = i;
            }
        }
        Ok(finished.swap_remove(best))
    }
}

/// Translates a document laid out without targets.
pub fn translate_layout(model: &Model, layout: &InstanceLayout, config: &DecodeConfig, probes: &Probes) -> Result<Translation> {
    config.validate()?;
    let enc_masks = build_encoder_masks(layout, model.config().adjacent_window)?;
    let mut enc_graph = Graph::eval();
    let encoded = Session::new(model, &mut enc_graph, false).encode(layout, &enc_masks, probes)?;
    let memory = encoded.memory();
    let decoder = Decoder {
        model,
        layout,
        enc_graph: &enc_graph,
        memory: &memory,
        probes,
    };
    let mut hyp = Hypothesis {
        sentences: Vec::new(),
        log_prob: 0.0,
        finished: Vec::new(),
    };
    for span in &layout.sentence_spans {
        let prev = hyp.outputs();
        let (tokens, lp) = decoder.beam_search(&prev, config.max_len(span.len()), config)?;
        hyp.sentences.push(tokens);
        hyp.log_prob += lp;
        hyp.finished.push(true);
    }
    Ok(Translation {
        hypothesis: hyp,
        selection: encoded.selection,
    })
}

/// Source sentences with their top-1 retrievals, self-exclusion off.
pub fn inference_layout(sources: &[Vec<TokenId>], index: &TmIndex) -> Result<InstanceLayout> {
    let tm: Vec<(Vec<TokenId>, Vec<TokenId>)> = sources
        .iter()
        .map(|s| {
            let r: RetrievedPair = index.retrieve(Query { tokens: s, global_id: None }, false);
            (r.retrieved_src, r.retrieved_tgt)
        })
        .collect();
    InstanceLayout::from_parts(sources, &tm, Vec::new())
}

/// Retrieves for every sentence of `document` and translates it. Gold
/// targets in `document` are ignored.
pub fn translate_document(model: &Model, document: &Document, index: &TmIndex, config: &DecodeConfig) -> Result<Translation> {
    let sources: Vec<Vec<TokenId>> = document.pairs.iter().map(|p| p.src_tokens.clone()).collect();
    translate_layout(model, &inference_layout(&sources, index)?, config, &Probes::default())
}

/// Translates every document independently, in corpus order.
pub fn translate_corpus(
    model: &Model,
    corpus: &Corpus,
    index: &TmIndex,
    config: &DecodeConfig,
    exec: Execution,
) -> Result<Vec<Translation>> {
    exec.try_map(&corpus.documents, |d| translate_document(model, d, index, config))
}

/// Position-wise agreement of decoded outputs (EOS included) with the gold
/// targets, over the longer of the two sequences per sentence.
pub fn output_token_accuracy(translations: &[Translation], corpus: &Corpus) -> Result<(usize, usize)> {
    if translations.len() != corpus.documents.len() {
        return Err(SmdtError::InvalidArgument("one translation per document expected".into()));
    }
    let (mut correct, mut total) = (0, 0);
    for (t, d) in translations.iter().zip(&corpus.documents) {
        for (hyp, pair) in t.hypothesis.sentences.iter().zip(&d.pairs) {
            let gold: Vec<TokenId> = pair.tgt_tokens.iter().copied().chain([EOS]).collect();
            total += gold.len().max(hyp.len());
            correct += gold.iter().zip(hyp).filter(|(a, b)| a == b).count();
        }
    }
    Ok((correct, total))
}
