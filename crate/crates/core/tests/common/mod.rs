//! Test-side oracles shared by the integration and acceptance suites.

#![allow(dead_code)]

use smdt::layout::{InstanceLayout, SegmentKind, SegmentTag};
use smdt::numerics::{Tensor, MASK_BLOCKED};

/// Mask families named as in `MaskSet::named`.
pub const FAMILIES: [&str; 9] = [
    "enc_local",
    "enc_memory_focus",
    "enc_document",
    "enc_adjacent",
    "enc_selection",
    "dec_self_local",
    "dec_self_document",
    "cross_local",
    "cross_global",
];

fn is_tm(t: SegmentTag) -> bool {
    matches!(t.kind, SegmentKind::RetSrc | SegmentKind::RetTgt)
}

/// Whether encoder query `q` may see encoder key `k`, decided from the
/// segment tags alone.
pub fn encoder_allowed(family: &str, tags: &[SegmentTag], window: usize, q: usize, k: usize) -> bool {
    let (tq, tk) = (tags[q], tags[k]);
    let same_span = tq == tk;
    let src = |t: SegmentTag| t.kind == SegmentKind::SrcSent;
    match family {
        "enc_local" => same_span,
        "enc_memory_focus" => {
            if tq.kind == SegmentKind::Sep {
                k == q
            } else {
                tk.kind != SegmentKind::Sep && tk.sentence == tq.sentence
            }
        }
        "enc_document" => {
            if src(tq) {
                src(tk)
            } else {
                same_span
            }
        }
        "enc_adjacent" => {
            if src(tq) {
                src(tk) && (tq.sentence - tk.sentence).unsigned_abs() as usize <= window
            } else {
                same_span
            }
        }
        "enc_selection" => {
            if is_tm(tq) {
                is_tm(tk)
            } else {
                same_span
            }
        }
        _ => panic!("not an encoder family: {family}"),
    }
}

/// Whether decoder query `q` may see key `k` (decoder position for self
/// families, encoder position for cross families).
pub fn decoder_allowed(family: &str, tags: &[SegmentTag], lengths: &[usize], q: usize, k: usize) -> bool {
    let segment: Vec<usize> = lengths
        .iter()
        .enumerate()
        .flat_map(|(i, &n)| std::iter::repeat(i).take(n))
        .collect();
    match family {
        "dec_self_local" => k <= q && segment[k] == segment[q],
        "dec_self_document" => k <= q,
        "cross_local" => tags[k].kind == SegmentKind::SrcSent && tags[k].sentence as usize == segment[q],
        "cross_global" => tags[k].kind != SegmentKind::Sep,
        _ => panic!("not a decoder family: {family}"),
    }
}

/// Compares one mask with the oracle. Returns the first disagreement.
pub fn check_mask(
    family: &str,
    mask: &Tensor,
    layout: &InstanceLayout,
    lengths: &[usize],
    window: usize,
) -> Result<(), String> {
    let n = layout.len();
    let t: usize = lengths.iter().sum();
    let decoder_q = family.starts_with("dec") || family.starts_with("cross");
    let rows = if decoder_q { t } else { n };
    let cols = if family.starts_with("dec") { t } else { n };
    if mask.shape() != [rows, cols] {
        return Err(format!("{family}: shape {:?}, expected [{rows}, {cols}]", mask.shape()));
    }
    for q in 0..rows {
        let mut any = false;
        for k in 0..cols {
            let v = mask.get(q, k);
            if v != 0.0 && v != MASK_BLOCKED {
                return Err(format!("{family}[{q},{k}] = {v}"));
            }
            let want = if decoder_q {
                decoder_allowed(family, &layout.tags, lengths, q, k)
            } else {
                encoder_allowed(family, &layout.tags, window, q, k)
            };
            if (v == 0.0) != want {
                return Err(format!("{family}[{q},{k}]: mask {v}, oracle allows {want}"));
            }
            any |= want;
        }
        if !any {
            return Err(format!("{family}: row {q} fully masked"));
        }
    }
    Ok(())
}

/// Checks every family of `masks.named()`.
pub fn check_mask_set(set: &smdt::layout::MaskSet, layout: &InstanceLayout, window: usize) -> Result<(), String> {
    let named = set.named();
    if named.len() != FAMILIES.len() {
        return Err(format!("{} families", named.len()));
    }
    for ((name, mask), want) in named.into_iter().zip(FAMILIES) {
        if name != want {
            return Err(format!("family {name}, expected {want}"));
        }
        check_mask(name, mask, layout, &set.decoder.lengths, window)?;
    }
    Ok(())
}

/// Max absolute difference between two equally shaped tensors.
pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
