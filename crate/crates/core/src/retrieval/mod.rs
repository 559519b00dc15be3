//! Sentence-level BM25 translation memory.
//!
//! The index covers the source side of every training pair; terms are token
//! ids. Retrieval returns the single best-scoring pair `(x^r, y^r)` for a
//! query sentence.

mod format;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, TokenId};
use crate::error::{Result, SmdtError};
use crate::parallel::Execution;

pub use format::INDEX_FORMAT_VERSION;

pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Posting {
    pub global_id: usize,
    pub tf: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TmEntry {
    pub global_id: usize,
    pub src: Vec<TokenId>,
    pub tgt: Vec<TokenId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TmIndex {
    k1: f64,
    b: f64,
    postings: BTreeMap<TokenId, Vec<Posting>>,
    avg_len: f64,
    /// Indexed pairs, sorted by global id.
    entries: Vec<TmEntry>,
    position: HashMap<usize, usize>,
}

/// A query sentence; `global_id` identifies it for self-exclusion.
#[derive(Clone, Copy, Debug)]
pub struct Query<'a> {
    pub tokens: &'a [TokenId],
    pub global_id: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievedPair {
    pub query_global_id: Option<usize>,
    pub source_global_id: Option<usize>,
    pub score: f64,
    pub retrieved_src: Vec<TokenId>,
    pub retrieved_tgt: Vec<TokenId>,
}

impl RetrievedPair {
    pub fn empty(query_global_id: Option<usize>) -> Self {
        RetrievedPair {
            query_global_id,
            source_global_id: None,
            score: 0.0,
            retrieved_src: Vec::new(),
            retrieved_tgt: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.source_global_id.is_none()
    }
}

impl TmIndex {
    pub fn build(corpus: &Corpus, k1: f64, b: f64) -> Result<Self> {
        let entries: Vec<TmEntry> = corpus
            .pairs()
            .map(|p| TmEntry {
                global_id: p.global_id,
                src: p.src_tokens.clone(),
                tgt: p.tgt_tokens.clone(),
            })
            .collect();
        TmIndex::from_entries(entries, k1, b)
    }

    pub fn from_entries(mut entries: Vec<TmEntry>, k1: f64, b: f64) -> Result<Self> {
        if !(k1 > 0.0) || !k1.is_finite() {
            return Err(SmdtError::Retrieval(format!("k1 must be positive, got {k1}")));
        }
        if !(0.0..=1.0).contains(&b) {
            return Err(SmdtError::Retrieval(format!("b must lie in [0, 1], got {b}")));
        }
        if entries.is_empty() {
            return Err(SmdtError::Retrieval("cannot index an empty corpus".into()));
        }
        entries.sort_by_key(|e| e.global_id);
        let mut position = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if position.insert(e.global_id, i).is_some() {
                return Err(SmdtError::Retrieval(format!(
                    "duplicate global id {}",
                    e.global_id
                )));
            }
        }
        let mut postings: BTreeMap<TokenId, Vec<Posting>> = BTreeMap::new();
        let mut total_len = 0usize;
        for e in &entries {
            total_len += e.src.len();
            let mut tf: BTreeMap<TokenId, u32> = BTreeMap::new();
            for &t in &e.src {
                *tf.entry(t).or_insert(0) += 1;
            }
            for (t, n) in tf {
                postings.entry(t).or_default().push(Posting {
                    global_id: e.global_id,
                    tf: n,
                });
            }
        }
        let avg_len = total_len as f64 / entries.len() as f64;
        Ok(TmIndex {
            k1,
            b,
            postings,
            avg_len,
            entries,
            position,
        })
    }

    pub fn k1(&self) -> f64 {
        self.k1
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn avg_len(&self) -> f64 {
        self.avg_len
    }

    pub fn entries(&self) -> &[TmEntry] {
        &self.entries
    }

    pub fn entry(&self, global_id: usize) -> Option<&TmEntry> {
        self.position.get(&global_id).map(|&i| &self.entries[i])
    }

    pub fn postings(&self, term: TokenId) -> &[Posting] {
        self.postings.get(&term).map_or(&[], Vec::as_slice)
    }

    pub fn terms(&self) -> impl Iterator<Item = (TokenId, &[Posting])> {
        self.postings.iter().map(|(&t, p)| (t, p.as_slice()))
    }

    pub fn df(&self, term: TokenId) -> usize {
        self.postings(term).len()
    }

    /// `ln((N - df + 0.5) / (df + 0.5) + 1)`, non-negative for every df.
    pub fn idf(&self, term: TokenId) -> f64 {
        let n = self.entries.len() as f64;
        let df = self.df(term) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    fn term_weight(&self, idf: f64, tf: u32, len: usize) -> f64 {
        let tf = f64::from(tf);
        let norm = self.k1 * (1.0 - self.b + self.b * len as f64 / self.avg_len);
        idf * tf * (self.k1 + 1.0) / (tf + norm)
    }

    /// BM25 of one indexed sentence; repeated query terms count once.
    pub fn bm25_score(&self, query_terms: &[TokenId], candidate_id: usize) -> Result<f64> {
        let entry = self.entry(candidate_id).ok_or_else(|| {
            SmdtError::Retrieval(format!("unknown candidate id {candidate_id}"))
        })?;
        let mut score = 0.0;
        for term in distinct(query_terms) {
            let plist = self.postings(term);
            if let Ok(i) = plist.binary_search_by_key(&candidate_id, |p| p.global_id) {
                score += self.term_weight(self.idf(term), plist[i].tf, entry.src.len());
            }
        }
        Ok(score)
    }

    /// Up to `k` hits with positive score, best first; ties go to the lower
    /// global id.
    pub fn retrieve_top_k(
        &self,
        query: Query<'_>,
        k: usize,
        exclude_self: bool,
    ) -> Vec<RetrievedPair> {
        let mut scores = vec![0.0; self.entries.len()];
        let mut touched = Vec::new();
        for term in distinct(query.tokens) {
            let idf = self.idf(term);
            for p in self.postings(term) {
                let pos = self.position[&p.global_id];
                if scores[pos] == 0.0 {
                    touched.push(pos);
                }
                scores[pos] += self.term_weight(idf, p.tf, self.entries[pos].src.len());
            }
        }
        let mut hits: Vec<(usize, f64)> = touched
            .into_iter()
            .filter(|&pos| scores[pos] > 0.0)
            .filter(|&pos| !(exclude_self && Some(self.entries[pos].global_id) == query.global_id))
            .map(|pos| (pos, scores[pos]))
            .collect();
        hits.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        hits.truncate(k);
        hits.into_iter()
            .map(|(pos, score)| {
                let e = &self.entries[pos];
                RetrievedPair {
                    query_global_id: query.global_id,
                    source_global_id: Some(e.global_id),
                    score,
                    retrieved_src: e.src.clone(),
                    retrieved_tgt: e.tgt.clone(),
                }
            })
            .collect()
    }

    /// Top-1 retrieval. Returns an empty pair when nothing scores above zero.
    pub fn retrieve(&self, query: Query<'_>, exclude_self: bool) -> RetrievedPair {
        self.retrieve_top_k(query, 1, exclude_self)
            .pop()
            .unwrap_or_else(|| RetrievedPair::empty(query.global_id))
    }

    /// One retrieval per pair of `corpus`, in corpus order.
    pub fn retrieve_corpus(
        &self,
        corpus: &Corpus,
        exclude_self: bool,
        exec: Execution,
    ) -> Vec<RetrievedPair> {
        let pairs: Vec<_> = corpus.pairs().collect();
        exec.map(&pairs, |p| {
            self.retrieve(
                Query {
                    tokens: &p.src_tokens,
                    global_id: Some(p.global_id),
                },
                exclude_self,
            )
        })
    }
}

fn distinct(terms: &[TokenId]) -> BTreeSet<TokenId> {
    terms.iter().copied().collect()
}

/// Writes one JSON record per retrieval.
pub fn to_jsonl(results: &[RetrievedPair]) -> Result<String> {
    let mut out = String::new();
    for r in results {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn index(sentences: &[&[TokenId]]) -> TmIndex {
        let entries = sentences
            .iter()
            .enumerate()
            .map(|(i, s)| TmEntry {
                global_id: i,
                src: s.to_vec(),
                tgt: vec![100 + i as TokenId],
            })
            .collect();
        TmIndex::from_entries(entries, DEFAULT_K1, DEFAULT_B).unwrap()
    }

    #[test]
    fn counts_document_frequency_and_length() {
        let (a, b, c, d) = (10, 11, 12, 13);
        let idx = index(&[&[a, b], &[a, c], &[d]]);
        assert_eq!(idx.df(a), 2);
        assert_eq!(idx.df(c), 1);
        assert!((idx.avg_len() - 5.0 / 3.0).abs() < 1e-12);
        for (_, plist) in idx.terms() {
            assert!(plist.windows(2).all(|w| w[0].global_id < w[1].global_id));
        }
    }

    #[test]
    fn single_sentence_corpus() {
        let idx = index(&[&[7, 8, 8]]);
        assert_eq!(idx.df(7), 1);
        assert_eq!(idx.df(8), 1);
        assert_eq!(idx.avg_len(), 3.0);
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        let e = vec![TmEntry {
            global_id: 0,
            src: vec![1],
            tgt: vec![1],
        }];
        assert!(TmIndex::from_entries(e.clone(), 0.0, 0.75).is_err());
        assert!(TmIndex::from_entries(e, 1.2, 1.5).is_err());
        assert!(TmIndex::from_entries(Vec::new(), 1.2, 0.75).is_err());
    }

    #[test]
    fn disjoint_query_scores_zero_and_unknown_candidate_errors() {
        let idx = index(&[&[1, 2], &[3]]);
        assert_eq!(idx.bm25_score(&[9], 0).unwrap(), 0.0);
        assert!(idx.bm25_score(&[1], 5).is_err());
    }

    #[test]
    fn single_sentence_closed_form() {
        // N = 1, df = 1: idf = ln(0.5/1.5 + 1) = ln(4/3); len/avg = 1.
        let idx = index(&[&[7, 8, 8]]);
        let k1 = DEFAULT_K1;
        let idf = (4.0f64 / 3.0).ln();
        let expected = idf * 1.0 * (k1 + 1.0) / (1.0 + k1) + idf * 2.0 * (k1 + 1.0) / (2.0 + k1);
        let got = idx.bm25_score(&[7, 8, 8, 7], 0).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn score_increases_with_term_frequency() {
        let idx = index(&[&[5, 1], &[5, 5], &[2, 3]]);
        let one = idx.bm25_score(&[5], 0).unwrap();
        let two = idx.bm25_score(&[5], 1).unwrap();
        assert!(two > one);
    }

    #[test]
    fn unique_term_dominates() {
        let idx = index(&[&[1, 2], &[1, 3], &[1, 4, 9]]);
        let hit = idx.retrieve(
            Query {
                tokens: &[1, 4, 9],
                global_id: None,
            },
            false,
        );
        assert_eq!(hit.source_global_id, Some(2));
        assert_eq!(hit.retrieved_tgt, vec![102]);
    }

    #[test]
    fn self_exclusion_can_exhaust_candidates() {
        let idx = index(&[&[1, 2]]);
        let q = Query {
            tokens: &[1, 2],
            global_id: Some(0),
        };
        assert!(idx.retrieve(q, true).is_empty());
        assert_eq!(idx.retrieve(q, false).source_global_id, Some(0));
    }

    #[test]
    fn ties_go_to_lowest_global_id() {
        let idx = index(&[&[4, 1], &[1, 4], &[1, 4]]);
        let hit = idx.retrieve(
            Query {
                tokens: &[1, 4],
                global_id: Some(0),
            },
            true,
        );
        assert_eq!(hit.source_global_id, Some(1));
        let top = idx.retrieve_top_k(
            Query {
                tokens: &[1, 4],
                global_id: None,
            },
            5,
            false,
        );
        let ids: Vec<_> = top.iter().map(|h| h.source_global_id.unwrap()).collect();
        assert_eq!(ids, vec![0, 1, 2]);
    }

    #[test]
    fn jsonl_has_one_record_per_query() {
        let idx = index(&[&[1, 2], &[2, 3]]);
        let hits = vec![
            idx.retrieve(Query { tokens: &[1], global_id: Some(0) }, true),
            idx.retrieve(Query { tokens: &[3], global_id: Some(5) }, true),
        ];
        let text = to_jsonl(&hits).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let v: serde_json::Value = serde_json::from_str(lines[1]).unwrap();
        assert_eq!(v["source_global_id"], 1);
        assert_eq!(v["query_global_id"], 5);
        assert!(v["retrieved_tgt"].is_array());
        let v: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        assert!(v["source_global_id"].is_null());
    }
}
