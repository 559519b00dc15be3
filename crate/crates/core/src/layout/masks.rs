//! Additive attention masks over an [`InstanceLayout`].
//!
//! Every mask is a `[queries, keys]` tensor holding `0` (allowed) or
//! [`MASK_BLOCKED`]. Each query row allows a contiguous range or a union of a
//! few contiguous ranges, so masks are filled range by range.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{decoder_spans, InstanceLayout, SegmentKind};
use crate::error::{Result, SmdtError};
use crate::numerics::{Tensor, MASK_BLOCKED};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HeadKind {
    MemoryFocus,
    Document,
    Adjacent,
}

/// Number of global-stream heads per attention kind. Serialised as
/// `[memory_focus, document, adjacent]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 3]", into = "[usize; 3]")]
pub struct HeadAllocation {
    pub memory_focus: usize,
    pub document: usize,
    pub adjacent: usize,
}

impl HeadAllocation {
    pub fn total(&self) -> usize {
        self.memory_focus + self.document + self.adjacent
    }
}

impl From<[usize; 3]> for HeadAllocation {
    fn from([memory_focus, document, adjacent]: [usize; 3]) -> Self {
        HeadAllocation {
            memory_focus,
            document,
            adjacent,
        }
    }
}

impl From<HeadAllocation> for [usize; 3] {
    fn from(a: HeadAllocation) -> Self {
        [a.memory_focus, a.document, a.adjacent]
    }
}

impl Default for HeadAllocation {
    fn default() -> Self {
        HeadAllocation {
            memory_focus: 3,
            document: 3,
            adjacent: 2,
        }
    }
}

/// Memory-focus heads first, then document, then adjacent.
pub fn allocate_heads(num_heads: usize, allocation: HeadAllocation) -> Result<Vec<HeadKind>> {
    if allocation.total() != num_heads {
        return Err(SmdtError::Config(format!(
            "allocation sums to {} ≠ {}",
            allocation.total(),
            num_heads
        )));
    }
    let mut kinds = vec![HeadKind::MemoryFocus; allocation.memory_focus];
    kinds.extend(std::iter::repeat(HeadKind::Document).take(allocation.document));
    kinds.extend(std::iter::repeat(HeadKind::Adjacent).take(allocation.adjacent));
    Ok(kinds)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderMasks {
    pub local: Tensor,
    pub memory_focus: Tensor,
    pub document: Tensor,
    pub adjacent: Tensor,
    /// Visibility of the selection layer's self-attention: the whole TM block
    /// for TM queries, local elsewhere.
    pub selection: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderMasks {
    pub self_local: Tensor,
    pub self_document: Tensor,
    pub cross_local: Tensor,
    pub cross_global: Tensor,
    /// Segment lengths the masks were built for.
    pub lengths: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    pub encoder: EncoderMasks,
    pub decoder: DecoderMasks,
    pub adjacent_window: usize,
}

impl MaskSet {
    pub fn global_kind(&self, kind: HeadKind) -> &Tensor {
        match kind {
            HeadKind::MemoryFocus => &self.encoder.memory_focus,
            HeadKind::Document => &self.encoder.document,
            HeadKind::Adjacent => &self.encoder.adjacent,
        }
    }

    /// `(name, mask)` for every family, in a fixed order.
    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("enc_local", &self.encoder.local),
            ("enc_memory_focus", &self.encoder.memory_focus),
            ("enc_document", &self.encoder.document),
            ("enc_adjacent", &self.encoder.adjacent),
            ("enc_selection", &self.encoder.selection),
            ("dec_self_local", &self.decoder.self_local),
            ("dec_self_document", &self.decoder.self_document),
            ("cross_local", &self.decoder.cross_local),
            ("cross_global", &self.decoder.cross_global),
        ]
    }
}

fn fill(rows: usize, cols: usize, allowed: impl Fn(usize) -> Vec<Range<usize>>) -> Tensor {
    let mut data = vec![MASK_BLOCKED; rows * cols];
    for q in 0..rows {
        for r in allowed(q) {
            data[q * cols + r.start..q * cols + r.end].fill(0.0);
        }
    }
    Tensor::new(vec![rows, cols], data).expect("mask shape")
}

/// The span owning encoder position `q`.
fn own_span(layout: &InstanceLayout, q: usize) -> Range<usize> {
    let tag = layout.tags[q];
    let i = tag.sentence as usize;
    match tag.kind {
        SegmentKind::SrcSent => layout.sentence_spans[i].clone(),
        SegmentKind::RetSrc => layout.tm_spans[i].src.clone(),
        SegmentKind::RetTgt => layout.tm_spans[i].tgt.clone(),
        SegmentKind::Sep => q..q + 1,
    }
}

pub fn build_encoder_masks(layout: &InstanceLayout, adjacent_window: usize) -> Result<EncoderMasks> {
    if adjacent_window == 0 {
        return Err(SmdtError::Layout("adjacent window must be at least 1".into()));
    }
    let n = layout.len();
    let m = layout.num_sentences();
    let doc = 0..layout.document_end();

    let local = fill(n, n, |q| vec![own_span(layout, q)]);
    let memory_focus = fill(n, n, |q| {
        let tag = layout.tags[q];
        match tag.kind {
            SegmentKind::Sep => vec![q..q + 1],
            _ => {
                let i = tag.sentence as usize;
                vec![
                    layout.sentence_spans[i].clone(),
                    layout.tm_spans[i].src.clone(),
                    layout.tm_spans[i].tgt.clone(),
                ]
            }
        }
    });
    let document = fill(n, n, |q| match layout.tags[q].kind {
        SegmentKind::SrcSent => vec![doc.clone()],
        _ => vec![own_span(layout, q)],
    });
    let adjacent = fill(n, n, |q| {
        let tag = layout.tags[q];
        match tag.kind {
            SegmentKind::SrcSent => {
                let i = tag.sentence as usize;
                let lo = i.saturating_sub(adjacent_window);
                let hi = (i + adjacent_window).min(m - 1);
                vec![layout.sentence_spans[lo].start..layout.sentence_spans[hi].end]
            }
            _ => vec![own_span(layout, q)],
        }
    });
    let tm_block = layout.tm_block();
    let selection = fill(n, n, |q| {
        if layout.tags[q].is_tm() {
            vec![tm_block.clone()]
        } else {
            vec![own_span(layout, q)]
        }
    });
    Ok(EncoderMasks {
        local,
        memory_focus,
        document,
        adjacent,
        selection,
    })
}

/// Decoder masks for a stream of consecutive segments, one per source
/// sentence, with the given lengths. Segment `i` may be shorter than `m` at
/// inference time: only the first `lengths.len()` sentences have started.
pub fn build_decoder_masks(layout: &InstanceLayout, lengths: &[usize]) -> Result<DecoderMasks> {
    if lengths.len() > layout.num_sentences() {
        return Err(SmdtError::Layout(format!(
            "{} decoder segments for {} source sentences",
            lengths.len(),
            layout.num_sentences()
        )));
    }
    if lengths.iter().any(|&l| l == 0) {
        return Err(SmdtError::Layout("decoder segments must be non-empty".into()));
    }
    let spans = decoder_spans(lengths);
    let t: usize = lengths.iter().sum();
    let n = layout.len();
    let segment_of: Vec<usize> = spans
        .iter()
        .enumerate()
        .flat_map(|(i, r)| std::iter::repeat(i).take(r.len()))
        .collect();

    let self_local = fill(t, t, |q| vec![spans[segment_of[q]].start..q + 1]);
    let self_document = fill(t, t, |q| vec![0..q + 1]);
    let cross_local = fill(t, n, |q| vec![layout.sentence_spans[segment_of[q]].clone()]);
    let cross_global = fill(t, n, |_| vec![0..layout.document_end(), layout.tm_block()]);
    Ok(DecoderMasks {
        self_local,
        self_document,
        cross_local,
        cross_global,
        lengths: lengths.to_vec(),
    })
}

/// Encoder masks plus teacher-forcing decoder masks.
pub fn build_mask_set(layout: &InstanceLayout, adjacent_window: usize) -> Result<MaskSet> {
    Ok(MaskSet {
        encoder: build_encoder_masks(layout, adjacent_window)?,
        decoder: build_decoder_masks(layout, &layout.teacher_forcing_lengths())?,
        adjacent_window,
    })
}

pub fn is_allowed(mask: &Tensor, q: usize, k: usize) -> bool {
    mask.get(q, k) == 0.0
}

/// Maximal runs of allowed keys in row `q`.
pub fn allowed_ranges(mask: &Tensor, q: usize) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut start = None;
    for (k, &v) in mask.row(q).iter().enumerate() {
        match (v == 0.0, start) {
            (true, None) => start = Some(k),
            (false, Some(s)) => {
                out.push(s..k);
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push(s..mask.cols());
    }
    out
}

/// `#` for allowed entries, `.` for blocked ones, one line per query.
pub fn mask_grid(mask: &Tensor) -> String {
    let mut s = String::with_capacity(mask.rows() * (mask.cols() + 1));
    for q in 0..mask.rows() {
        for &v in mask.row(q) {
            s.push(if v == 0.0 { '#' } else { '.' });
        }
        s.push('\n');
    }
    s
}

pub fn mask_json(name: &str, mask: &Tensor, with_grid: bool) -> serde_json::Value {
    let rows: Vec<Vec<[usize; 2]>> = (0..mask.rows())
        .map(|q| allowed_ranges(mask, q).into_iter().map(|r| [r.start, r.end]).collect())
        .collect();
    let mut v = json!({
        "name": name,
        "shape": [mask.rows(), mask.cols()],
        "rows": rows,
    });
    if with_grid {
        v["grid"] = json!(mask_grid(mask));
    }
    v
}
