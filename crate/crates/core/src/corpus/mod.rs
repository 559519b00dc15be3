//! Aligned bilingual documents: ingestion, encoding and truncation.

mod vocab;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SmdtError};

pub use vocab::{
    TokenId, Vocabulary, BOS, EOS, NUM_RESERVED, PAD, RESERVED, RS, RT, SEP, UNK,
};

/// Source-token limit applied to every document.
pub const DEFAULT_TRUNCATION_LIMIT: usize = 1000;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Valid,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawPair {
    pub src: String,
    pub tgt: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawDocument {
    pub doc_id: String,
    pub pairs: Vec<RawPair>,
}

/// Ingested text before subword encoding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawCorpus {
    pub documents: Vec<RawDocument>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentencePair {
    pub src_tokens: Vec<TokenId>,
    pub tgt_tokens: Vec<TokenId>,
    pub doc_id: String,
    pub index_in_doc: usize,
    pub global_id: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Document {
    pub doc_id: String,
    pub pairs: Vec<SentencePair>,
    pub token_count: usize,
    /// Set when a single retained pair alone exceeds the truncation limit.
    pub oversize: bool,
}

impl Document {
    pub fn new(doc_id: String, pairs: Vec<SentencePair>) -> Self {
        let token_count = pairs.iter().map(|p| p.src_tokens.len()).sum();
        Document {
            doc_id,
            pairs,
            token_count,
            oversize: false,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub documents: Vec<Document>,
    pub vocab: Vocabulary,
    pub split: Split,
}

impl Corpus {
    pub fn pairs(&self) -> impl Iterator<Item = &SentencePair> {
        self.documents.iter().flat_map(|d| d.pairs.iter())
    }

    pub fn num_pairs(&self) -> usize {
        self.documents.iter().map(Document::len).sum()
    }

    pub fn truncated(mut self, limit: usize) -> Self {
        self.documents = self
            .documents
            .into_iter()
            .map(|d| truncate_document(d, limit))
            .collect();
        self
    }
}

/// Half-open line range owned by one document.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DocRange {
    pub doc_id: String,
    pub start: usize,
    pub end: usize,
}

/// Parses `doc_id<TAB>start_line<TAB>end_line_exclusive` lines.
pub fn parse_doc_map(text: &str) -> Result<Vec<DocRange>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let bad = || SmdtError::Corpus(format!("doc map line {}: expected `id<TAB>start<TAB>end`", n + 1));
        if fields.len() != 3 {
            return Err(bad());
        }
        let start = fields[1].trim().parse().map_err(|_| bad())?;
        let end = fields[2].trim().parse().map_err(|_| bad())?;
        out.push(DocRange {
            doc_id: fields[0].to_string(),
            start,
            end,
        });
    }
    Ok(out)
}

pub fn format_doc_map(ranges: &[DocRange]) -> String {
    ranges
        .iter()
        .map(|r| format!("{}\t{}\t{}\n", r.doc_id, r.start, r.end))
        .collect()
}

impl RawCorpus {
    /// Partitions aligned lines into documents. Ranges must tile `0..lines`
    /// exactly once.
    pub fn from_lines(
        src: &[&str],
        tgt: &[&str],
        ranges: &[DocRange],
        split: Split,
    ) -> Result<Self> {
        if src.len() != tgt.len() {
            return Err(SmdtError::Corpus(format!(
                "line-count mismatch: {} source lines vs {} target lines",
                src.len(),
                tgt.len()
            )));
        }
        let mut sorted = ranges.to_vec();
        sorted.sort_by_key(|r| (r.start, r.end));
        let mut cursor = 0;
        for r in &sorted {
            if r.start >= r.end {
                return Err(SmdtError::Corpus(format!("empty document `{}`", r.doc_id)));
            }
            if r.start > cursor {
                return Err(SmdtError::Corpus(format!(
                    "gapped doc ranges: lines {cursor}..{} belong to no document",
                    r.start
                )));
            }
            if r.start < cursor {
                return Err(SmdtError::Corpus(format!(
                    "overlapping doc ranges at line {}",
                    r.start
                )));
            }
            cursor = r.end;
        }
        if cursor < src.len() {
            return Err(SmdtError::Corpus(format!(
                "gapped doc ranges: lines {cursor}..{} belong to no document",
                src.len()
            )));
        }
        if cursor > src.len() {
            return Err(SmdtError::Corpus(format!(
                "doc ranges extend to line {cursor} but the corpus has {} lines",
                src.len()
            )));
        }
        let documents = sorted
            .into_iter()
            .map(|r| RawDocument {
                doc_id: r.doc_id,
                pairs: (r.start..r.end)
                    .map(|i| RawPair {
                        src: src[i].to_string(),
                        tgt: tgt[i].to_string(),
                    })
                    .collect(),
            })
            .collect();
        Ok(RawCorpus { documents, split })
    }

    pub fn pairs(&self) -> impl Iterator<Item = &RawPair> {
        self.documents.iter().flat_map(|d| d.pairs.iter())
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.pairs().flat_map(|p| [p.src.as_str(), p.tgt.as_str()])
    }
}

/// Reads one-sentence-per-line source/target files and a TSV document map.
pub fn ingest_parallel_corpus(
    src_path: &Path,
    tgt_path: &Path,
    doc_map_path: &Path,
    split: Split,
) -> Result<RawCorpus> {
    let src = std::fs::read_to_string(src_path)?;
    let tgt = std::fs::read_to_string(tgt_path)?;
    let map = parse_doc_map(&std::fs::read_to_string(doc_map_path)?)?;
    let src: Vec<&str> = src.lines().collect();
    let tgt: Vec<&str> = tgt.lines().collect();
    RawCorpus::from_lines(&src, &tgt, &map, split)
}

/// Learns a vocabulary jointly over source and target text.
pub fn learn_subwords(corpus: &RawCorpus, num_merges: usize) -> Result<Vocabulary> {
    Vocabulary::learn(corpus.texts(), num_merges)
}

/// Encodes every sentence, assigning corpus-wide ids in file order.
pub fn encode_corpus(raw: &RawCorpus, vocab: &Vocabulary) -> Result<Corpus> {
    let mut global_id = 0;
    let mut documents = Vec::with_capacity(raw.documents.len());
    for doc in &raw.documents {
        let mut pairs = Vec::with_capacity(doc.pairs.len());
        for (index_in_doc, p) in doc.pairs.iter().enumerate() {
            let src_tokens = vocab.encode(&p.src);
            let tgt_tokens = vocab.encode(&p.tgt);
            if src_tokens.is_empty() || tgt_tokens.is_empty() {
                return Err(SmdtError::Corpus(format!(
                    "document `{}` sentence {index_in_doc} encodes to an empty sequence",
                    doc.doc_id
                )));
            }
            pairs.push(SentencePair {
                src_tokens,
                tgt_tokens,
                doc_id: doc.doc_id.clone(),
                index_in_doc,
                global_id,
            });
            global_id += 1;
        }
        documents.push(Document::new(doc.doc_id.clone(), pairs));
    }
    Ok(Corpus {
        documents,
        vocab: vocab.clone(),
        split: raw.split,
    })
}

/// Drops whole trailing pairs until the source token count fits `limit`. The
/// first pair is always kept; if it alone exceeds the limit the document is
/// flagged oversize.
pub fn truncate_document(mut doc: Document, limit: usize) -> Document {
    let limit = limit.max(1);
    let mut total = 0;
    let mut keep = 0;
    for p in &doc.pairs {
        if keep > 0 && total + p.src_tokens.len() > limit {
            break;
        }
        total += p.src_tokens.len();
        keep += 1;
    }
    doc.pairs.truncate(keep);
    doc.token_count = total;
    doc.oversize = total > limit;
    doc
}

#[cfg(test)]
mod tests {
    use super::*;

    fn range(id: &str, start: usize, end: usize) -> DocRange {
        DocRange {
            doc_id: id.into(),
            start,
            end,
        }
    }

    fn doc_with_lengths(lengths: &[usize]) -> Document {
        let pairs = lengths
            .iter()
            .enumerate()
            .map(|(i, &n)| SentencePair {
                src_tokens: vec![10; n],
                tgt_tokens: vec![11],
                doc_id: "d".into(),
                index_in_doc: i,
                global_id: i,
            })
            .collect();
        Document::new("d".into(), pairs)
    }

    #[test]
    fn partitions_aligned_lines() {
        let src = ["a", "b", "c", "d"];
        let tgt = ["A", "B", "C", "D"];
        let raw = RawCorpus::from_lines(
            &src,
            &tgt,
            &[range("d0", 0, 2), range("d1", 2, 4)],
            Split::Train,
        )
        .unwrap();
        assert_eq!(raw.documents.len(), 2);
        assert!(raw.documents.iter().all(|d| d.pairs.len() == 2));
        let lines: Vec<&str> = raw.pairs().map(|p| p.src.as_str()).collect();
        assert_eq!(lines, src);
    }

    #[test]
    fn gapped_ranges_are_rejected() {
        let lines = ["a"; 5];
        let err = RawCorpus::from_lines(
            &lines,
            &lines,
            &[range("d0", 0, 2), range("d1", 3, 5)],
            Split::Train,
        )
        .unwrap_err();
        assert!(err.to_string().contains("gapped doc ranges"), "{err}");
    }

    #[test]
    fn overlapping_and_empty_ranges_are_rejected() {
        let lines = ["a"; 4];
        let err = RawCorpus::from_lines(
            &lines,
            &lines,
            &[range("d0", 0, 3), range("d1", 2, 4)],
            Split::Train,
        )
        .unwrap_err();
        assert!(err.to_string().contains("overlapping"), "{err}");
        let err = RawCorpus::from_lines(
            &lines,
            &lines,
            &[range("d0", 0, 4), range("d1", 4, 4)],
            Split::Train,
        )
        .unwrap_err();
        assert!(err.to_string().contains("empty document"), "{err}");
    }

    #[test]
    fn line_count_mismatch_is_rejected() {
        let err = RawCorpus::from_lines(
            &["a"; 5],
            &["b"; 4],
            &[range("d0", 0, 5)],
            Split::Train,
        )
        .unwrap_err();
        assert!(err.to_string().contains("line-count mismatch"), "{err}");
    }

    #[test]
    fn doc_map_parsing() {
        let ranges = parse_doc_map("d0\t0\t2\n\nd1\t2\t4\n").unwrap();
        assert_eq!(ranges, vec![range("d0", 0, 2), range("d1", 2, 4)]);
        assert_eq!(format_doc_map(&ranges), "d0\t0\t2\nd1\t2\t4\n");
        assert!(parse_doc_map("d0 0 2").is_err());
    }

    #[test]
    fn encoding_assigns_global_ids_and_rejects_empty() {
        let raw = RawCorpus::from_lines(
            &["ab", "ba", "a"],
            &["x", "y", "xy"],
            &[range("d0", 0, 2), range("d1", 2, 3)],
            Split::Train,
        )
        .unwrap();
        let vocab = learn_subwords(&raw, 2).unwrap();
        let corpus = encode_corpus(&raw, &vocab).unwrap();
        let ids: Vec<usize> = corpus.pairs().map(|p| p.global_id).collect();
        assert_eq!(ids, vec![0, 1, 2]);
        assert_eq!(corpus.documents[1].pairs[0].index_in_doc, 0);
        assert!(corpus
            .pairs()
            .flat_map(|p| p.src_tokens.iter().chain(&p.tgt_tokens))
            .all(|&t| (t as usize) < vocab.len()));

        let raw = RawCorpus::from_lines(&["ab", ""], &["x", "y"], &[range("d0", 0, 2)], Split::Train)
            .unwrap();
        assert!(encode_corpus(&raw, &vocab).is_err());
    }

    #[test]
    fn truncation_drops_whole_trailing_sentences() {
        let d = truncate_document(doc_with_lengths(&[400, 400, 400]), 1000);
        assert_eq!(d.pairs.len(), 2);
        assert_eq!(d.token_count, 800);
        assert!(!d.oversize);

        let d = truncate_document(doc_with_lengths(&[10]), 1000);
        assert_eq!(d.pairs.len(), 1);
        assert!(!d.oversize);

        let d = truncate_document(doc_with_lengths(&[1200]), 1000);
        assert_eq!(d.pairs.len(), 1);
        assert!(d.oversize);
        assert_eq!(d.token_count, 1200);
    }

    #[test]
    fn ingest_from_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = |n: &str| dir.path().join(n);
        std::fs::write(p("s"), "a b\nc d\ne\n").unwrap();
        std::fs::write(p("t"), "A B\nC D\nE\n").unwrap();
        std::fs::write(p("m"), "x\t0\t2\ny\t2\t3\n").unwrap();
        let raw = ingest_parallel_corpus(&p("s"), &p("t"), &p("m"), Split::Valid).unwrap();
        assert_eq!(raw.documents.len(), 2);
        assert_eq!(raw.documents[0].pairs[1].tgt, "C D");
        assert_eq!(raw.split, Split::Valid);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn truncation_respects_limit(lengths in proptest::collection::vec(1usize..50, 1..12), limit in 1usize..120) {
                let d = truncate_document(doc_with_lengths(&lengths), limit);
                prop_assert!(!d.pairs.is_empty());
                prop_assert!(d.token_count <= limit || (d.pairs.len() == 1 && d.oversize));
                for (i, p) in d.pairs.iter().enumerate() {
                    prop_assert_eq!(p.index_in_doc, i);
                }
            }

            #[test]
            fn partition_reproduces_lines(sizes in proptest::collection::vec(1usize..5, 1..8)) {
                let total: usize = sizes.iter().sum();
                let lines: Vec<String> = (0..total).map(|i| format!("s{i}")).collect();
                let refs: Vec<&str> = lines.iter().map(String::as_str).collect();
                let mut start = 0;
                let ranges: Vec<DocRange> = sizes.iter().enumerate().map(|(i, &n)| {
                    let r = DocRange { doc_id: format!("d{i}"), start, end: start + n };
                    start += n;
                    r
                }).collect();
                let raw = RawCorpus::from_lines(&refs, &refs, &ranges, Split::Train).unwrap();
                let back: Vec<&str> = raw.pairs().map(|p| p.src.as_str()).collect();
                prop_assert_eq!(back, refs);
            }
        }
    }
}
