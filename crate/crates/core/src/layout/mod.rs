//! The concatenated encoder stream `x_1 … x_m SEP RS x_1^r RT y_1^r … RS x_m^r RT y_m^r`
//! and the per-sentence decoder streams `BOS y_i` → `y_i EOS`.

mod masks;

use std::ops::Range;

use serde::Serialize;

use crate::corpus::{Document, TokenId, BOS, EOS, RS, RT, SEP};
use crate::error::{Result, SmdtError};
use crate::retrieval::RetrievedPair;

pub use masks::{
    allocate_heads, allowed_ranges, build_decoder_masks, build_encoder_masks, build_mask_set,
    is_allowed, mask_grid, mask_json, DecoderMasks, EncoderMasks, HeadAllocation, HeadKind,
    MaskSet,
};

/// Target-language spans (retrieved targets and decoder streams) take positions
/// from this base, so they never share a position index with source-language
/// spans.
pub const TARGET_POSITION_BASE: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SegmentKind {
    SrcSent,
    RetSrc,
    RetTgt,
    Sep,
}

/// Owner of one encoder token. `sentence` is `-1` for the separator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct SegmentTag {
    pub kind: SegmentKind,
    pub sentence: i32,
}

impl SegmentTag {
    pub fn is_tm(self) -> bool {
        matches!(self.kind, SegmentKind::RetSrc | SegmentKind::RetTgt)
    }
}

/// Spans of one retrieved pair; each starts with its RS/RT marker.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TmSpans {
    pub src: Range<usize>,
    pub tgt: Range<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstanceLayout {
    pub tokens: Vec<TokenId>,
    pub tags: Vec<SegmentTag>,
    pub positions: Vec<usize>,
    pub sentence_spans: Vec<Range<usize>>,
    pub tm_spans: Vec<TmSpans>,
    pub sep_position: usize,
    /// Gold `y_i` per sentence; empty at inference time.
    pub target_tokens: Vec<Vec<TokenId>>,
}

impl InstanceLayout {
    /// Builds the stream from raw token sequences. `tm[i]` is the retrieved
    /// `(x_i^r, y_i^r)`; either side may be empty.
    pub fn from_parts(
        sources: &[Vec<TokenId>],
        tm: &[(Vec<TokenId>, Vec<TokenId>)],
        targets: Vec<Vec<TokenId>>,
    ) -> Result<Self> {
        let m = sources.len();
        if m == 0 {
            return Err(SmdtError::Layout("an instance needs at least one sentence".into()));
        }
        if tm.len() != m {
            return Err(SmdtError::Layout(format!(
                "{m} sentences but {} retrieved pairs",
                tm.len()
            )));
        }
        if !targets.is_empty() && targets.len() != m {
            return Err(SmdtError::Layout(format!(
                "{m} sentences but {} target sentences",
                targets.len()
            )));
        }
        if let Some(i) = sources.iter().position(Vec::is_empty) {
            return Err(SmdtError::Layout(format!("source sentence {i} is empty")));
        }

        let mut tokens = Vec::new();
        let mut tags = Vec::new();
        let mut positions = Vec::new();
        let mut push_span = |tokens: &mut Vec<TokenId>, content: &[TokenId], marker: Option<TokenId>, tag: SegmentTag, base: usize| {
            let start = tokens.len();
            for (offset, &t) in marker.iter().chain(content).enumerate() {
                tokens.push(t);
                tags.push(tag);
                positions.push(base + offset);
            }
            start..tokens.len()
        };

        let mut sentence_spans = Vec::with_capacity(m);
        for (i, s) in sources.iter().enumerate() {
            let tag = SegmentTag {
                kind: SegmentKind::SrcSent,
                sentence: i as i32,
            };
            sentence_spans.push(push_span(&mut tokens, s, None, tag, 0));
        }
        let sep_position = tokens.len();
        push_span(
            &mut tokens,
            &[SEP],
            None,
            SegmentTag {
                kind: SegmentKind::Sep,
                sentence: -1,
            },
            0,
        );
        let mut tm_spans = Vec::with_capacity(m);
        for (i, (xs, ys)) in tm.iter().enumerate() {
            let src = push_span(
                &mut tokens,
                xs,
                Some(RS),
                SegmentTag {
                    kind: SegmentKind::RetSrc,
                    sentence: i as i32,
                },
                0,
            );
            let tgt = push_span(
                &mut tokens,
                ys,
                Some(RT),
                SegmentTag {
                    kind: SegmentKind::RetTgt,
                    sentence: i as i32,
                },
                TARGET_POSITION_BASE,
            );
            tm_spans.push(TmSpans { src, tgt });
        }
        Ok(InstanceLayout {
            tokens,
            tags,
            positions,
            sentence_spans,
            tm_spans,
            sep_position,
            target_tokens: targets,
        })
    }

    pub fn num_sentences(&self) -> usize {
        self.sentence_spans.len()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// End of the document block (start of the separator).
    pub fn document_end(&self) -> usize {
        self.sep_position
    }

    /// Token range of the whole TM block (after the separator).
    pub fn tm_block(&self) -> Range<usize> {
        self.sep_position + 1..self.tokens.len()
    }

    /// Retrieved content of sentence `i` without markers.
    pub fn tm_content(&self, i: usize) -> (&[TokenId], &[TokenId]) {
        let s = &self.tm_spans[i];
        (
            &self.tokens[s.src.start + 1..s.src.end],
            &self.tokens[s.tgt.start + 1..s.tgt.end],
        )
    }

    pub fn tm_positions(&self) -> Vec<bool> {
        self.tags.iter().map(|t| t.is_tm()).collect()
    }

    /// Decoder-side lengths `|y_i| + 1` for teacher forcing.
    pub fn teacher_forcing_lengths(&self) -> Vec<usize> {
        self.target_tokens.iter().map(|y| y.len() + 1).collect()
    }

    /// `BOS y_1 BOS y_2 …`
    pub fn decoder_inputs(&self) -> Vec<TokenId> {
        self.target_tokens
            .iter()
            .flat_map(|y| std::iter::once(BOS).chain(y.iter().copied()))
            .collect()
    }

    /// `y_1 EOS y_2 EOS …`, aligned with [`InstanceLayout::decoder_inputs`].
    pub fn decoder_targets(&self) -> Vec<TokenId> {
        self.target_tokens
            .iter()
            .flat_map(|y| y.iter().copied().chain(std::iter::once(EOS)))
            .collect()
    }
}

/// Half-open ranges of consecutive decoder segments with the given lengths.
pub fn decoder_spans(lengths: &[usize]) -> Vec<Range<usize>> {
    let mut start = 0;
    lengths
        .iter()
        .map(|&n| {
            let r = start..start + n;
            start += n;
            r
        })
        .collect()
}

/// Positions of a decoder stream made of segments with the given lengths.
pub fn decoder_positions(lengths: &[usize]) -> Vec<usize> {
    lengths
        .iter()
        .flat_map(|&n| (0..n).map(|o| TARGET_POSITION_BASE + o))
        .collect()
}

/// Lays out a (truncated) document with one retrieved pair per sentence.
pub fn assemble_instance(document: &Document, retrieved: &[RetrievedPair]) -> Result<InstanceLayout> {
    if retrieved.len() != document.pairs.len() {
        return Err(SmdtError::Layout(format!(
            "{} sentences but {} retrieved pairs",
            document.pairs.len(),
            retrieved.len()
        )));
    }
    let sources: Vec<Vec<TokenId>> = document.pairs.iter().map(|p| p.src_tokens.clone()).collect();
    let targets: Vec<Vec<TokenId>> = document.pairs.iter().map(|p| p.tgt_tokens.clone()).collect();
    let tm: Vec<(Vec<TokenId>, Vec<TokenId>)> = retrieved
        .iter()
        .map(|r| (r.retrieved_src.clone(), r.retrieved_tgt.clone()))
        .collect();
    InstanceLayout::from_parts(&sources, &tm, targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SentencePair;

    fn tag(kind: SegmentKind, sentence: i32) -> SegmentTag {
        SegmentTag { kind, sentence }
    }

    #[test]
    fn single_sentence_stream() {
        let l = InstanceLayout::from_parts(&[vec![5, 6]], &[(vec![7], vec![8])], vec![vec![9]]).unwrap();
        assert_eq!(l.tokens, vec![5, 6, SEP, RS, 7, RT, 8]);
        use SegmentKind::*;
        assert_eq!(
            l.tags,
            vec![
                tag(SrcSent, 0),
                tag(SrcSent, 0),
                tag(Sep, -1),
                tag(RetSrc, 0),
                tag(RetSrc, 0),
                tag(RetTgt, 0),
                tag(RetTgt, 0)
            ]
        );
        assert_eq!(l.sentence_spans, vec![0..2]);
        assert_eq!(l.tm_spans, vec![TmSpans { src: 3..5, tgt: 5..7 }]);
        assert_eq!(l.tm_content(0), (&[7][..], &[8][..]));
        assert_eq!(
            l.positions,
            vec![0, 1, 0, 0, 1, TARGET_POSITION_BASE, TARGET_POSITION_BASE + 1]
        );
        assert_eq!(l.decoder_inputs(), vec![BOS, 9]);
        assert_eq!(l.decoder_targets(), vec![9, EOS]);
    }

    #[test]
    fn empty_tm_keeps_markers() {
        let l = InstanceLayout::from_parts(
            &[vec![5], vec![6, 6]],
            &[(vec![7], vec![8]), (vec![], vec![])],
            vec![],
        )
        .unwrap();
        assert_eq!(l.tm_spans[1], TmSpans { src: 8..9, tgt: 9..10 });
        assert_eq!(l.tm_content(1), (&[][..], &[][..]));
        assert_eq!(l.tokens[8..], [RS, RT]);
        assert_eq!(l.tm_block(), 4..10);
    }

    #[test]
    fn zero_sentences_is_an_error() {
        assert!(InstanceLayout::from_parts(&[], &[], vec![]).is_err());
    }

    #[test]
    fn assemble_checks_pair_count() {
        let pair = |g: usize| SentencePair {
            src_tokens: vec![10, 11],
            tgt_tokens: vec![12],
            doc_id: "d".into(),
            index_in_doc: g,
            global_id: g,
        };
        let doc = Document::new("d".into(), vec![pair(0), pair(1)]);
        assert!(assemble_instance(&doc, &[RetrievedPair::empty(Some(0))]).is_err());
        let l = assemble_instance(
            &doc,
            &[RetrievedPair::empty(Some(0)), RetrievedPair::empty(Some(1))],
        )
        .unwrap();
        assert_eq!(l.num_sentences(), 2);
        assert_eq!(l.teacher_forcing_lengths(), vec![2, 2]);
        assert_eq!(decoder_spans(&[2, 2]), vec![0..2, 2..4]);
        assert_eq!(
            decoder_positions(&[2, 1]),
            vec![TARGET_POSITION_BASE, TARGET_POSITION_BASE + 1, TARGET_POSITION_BASE]
        );
    }
}
