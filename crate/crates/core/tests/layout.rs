mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use smdt::layout::{
    allocate_heads, build_decoder_masks, build_mask_set, is_allowed, HeadAllocation, HeadKind, InstanceLayout,
};
use smdt::synthetic::{random_layout, LayoutBounds};

fn layout(src: &[usize], tm: &[(usize, usize)], tgt: &[usize]) -> InstanceLayout {
    InstanceLayout::from_parts(
        &src.iter().map(|&n| vec![9; n]).collect::<Vec<_>>(),
        &tm.iter().map(|&(a, b)| (vec![10; a], vec![11; b])).collect::<Vec<_>>(),
        tgt.iter().map(|&n| vec![12; n]).collect(),
    )
    .unwrap()
}

fn allowed(mask: &smdt::numerics::Tensor, q: usize) -> Vec<usize> {
    (0..mask.cols()).filter(|&k| is_allowed(mask, q, k)).collect()
}

#[test]
fn adjacent_window_of_one_over_three_sentences() {
    let l = layout(&[1, 1, 1], &[(0, 0); 3], &[1, 1, 1]);
    let m = build_mask_set(&l, 1).unwrap();
    assert_eq!(allowed(&m.encoder.adjacent, 0), vec![0, 1]);
    assert_eq!(allowed(&m.encoder.adjacent, 1), vec![0, 1, 2]);
    assert_eq!(allowed(&m.encoder.adjacent, 2), vec![1, 2]);
}

#[test]
fn single_sentence_document_mask_is_the_local_mask_on_the_document() {
    let l = layout(&[4], &[(2, 1)], &[2]);
    let m = build_mask_set(&l, 1).unwrap();
    for q in l.sentence_spans[0].clone() {
        assert_eq!(allowed(&m.encoder.document, q), allowed(&m.encoder.local, q));
    }
}

#[test]
fn local_sets_refine_the_document_block() {
    let l = layout(&[2, 3, 1], &[(1, 1), (0, 2), (3, 0)], &[1, 1, 1]);
    let m = build_mask_set(&l, 1).unwrap();
    let doc = allowed(&m.encoder.document, 0);
    for q in 0..l.document_end() {
        let local = allowed(&m.encoder.local, q);
        assert!(local.iter().all(|k| doc.contains(k)));
        assert!(allowed(&m.encoder.memory_focus, q).contains(&q));
    }
}

#[test]
fn head_orders() {
    use HeadKind::*;
    assert_eq!(
        allocate_heads(4, HeadAllocation::from([2, 1, 1])).unwrap(),
        vec![MemoryFocus, MemoryFocus, Document, Adjacent]
    );
    assert!(allocate_heads(8, HeadAllocation::from([3, 3, 3])).is_err());
}

#[test]
fn inference_time_decoder_masks_cover_only_started_sentences() {
    let l = layout(&[2, 2, 2], &[(1, 1); 3], &[]);
    let d = build_decoder_masks(&l, &[3, 1]).unwrap();
    assert_eq!(d.self_local.shape(), &[4, 4]);
    assert_eq!(allowed(&d.self_local, 3), vec![3]);
    assert_eq!(allowed(&d.self_document, 3), vec![0, 1, 2, 3]);
    assert!(common::check_mask("cross_local", &d.cross_local, &l, &[3, 1], 1).is_ok());
    assert!(build_decoder_masks(&l, &[1, 1, 1, 1]).is_err());
    assert!(build_decoder_masks(&l, &[1, 0]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn every_family_matches_the_oracle(seed in any::<u64>(), window in 1usize..=2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = random_layout(&mut rng, &LayoutBounds::default());
        let set = build_mask_set(&l, window).unwrap();
        prop_assert_eq!(common::check_mask_set(&set, &l, window), Ok(()));
    }

    #[test]
    fn decoder_self_masks_are_causal(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = random_layout(&mut rng, &LayoutBounds::default());
        let set = build_mask_set(&l, 1).unwrap();
        let t = set.decoder.self_document.rows();
        for q in 0..t {
            for k in q + 1..t {
                prop_assert!(!is_allowed(&set.decoder.self_document, q, k));
                prop_assert!(!is_allowed(&set.decoder.self_local, q, k));
            }
        }
    }
}
