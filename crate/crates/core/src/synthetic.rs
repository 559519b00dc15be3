//! Generated data: random encoder layouts and the copy-from-memory task.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{encode_corpus, Corpus, DocRange, RawCorpus, Split, TokenId, Vocabulary, NUM_RESERVED};
use crate::error::{Result, SmdtError};
use crate::layout::InstanceLayout;
use crate::parallel::Execution;
use crate::retrieval::{TmIndex, DEFAULT_B, DEFAULT_K1};

/// Bounds for [`random_layout`].
#[derive(Clone, Copy, Debug)]
pub struct LayoutBounds {
    pub max_sentences: usize,
    pub max_sentence_len: usize,
    /// Retrieved sides may be empty; each has at most this many tokens.
    pub max_tm_len: usize,
    pub max_target_len: usize,
    pub vocab_size: usize,
}

impl Default for LayoutBounds {
    fn default() -> Self {
        LayoutBounds {
            max_sentences: 6,
            max_sentence_len: 8,
            max_tm_len: 6,
            max_target_len: 8,
            vocab_size: 32,
        }
    }
}

/// A layout with random non-reserved tokens and random lengths.
pub fn random_layout<R: Rng>(rng: &mut R, bounds: &LayoutBounds) -> InstanceLayout {
    let seq = |rng: &mut R, lo: usize, hi: usize| -> Vec<TokenId> {
        let n = rng.gen_range(lo..=hi);
        (0..n)
            .map(|_| rng.gen_range(NUM_RESERVED..bounds.vocab_size) as TokenId)
            .collect()
    };
    let m = rng.gen_range(1..=bounds.max_sentences);
    let sources: Vec<_> = (0..m).map(|_| seq(rng, 1, bounds.max_sentence_len)).collect();
    let tm: Vec<_> = (0..m)
        .map(|_| (seq(rng, 0, bounds.max_tm_len), seq(rng, 0, bounds.max_tm_len)))
        .collect();
    let targets: Vec<_> = (0..m).map(|_| seq(rng, 1, bounds.max_target_len)).collect();
    InstanceLayout::from_parts(&sources, &tm, targets).expect("generated layout is valid")
}

/// Shape of the copy-from-memory corpus.
#[derive(Clone, Copy, Debug)]
pub struct CopyTaskConfig {
    /// Number of twin groups before filtering.
    pub groups: usize,
    pub sentences_per_doc: usize,
    /// Inclusive source length range; source letters within a sentence are distinct.
    pub src_len: (usize, usize),
    pub tgt_len: (usize, usize),
    /// Lowercase letters available to sources.
    pub src_alphabet: usize,
    /// Uppercase letters available to targets.
    pub tgt_alphabet: usize,
}

impl Default for CopyTaskConfig {
    fn default() -> Self {
        CopyTaskConfig {
            groups: 240,
            sentences_per_doc: 3,
            src_len: (6, 8),
            tgt_len: (3, 5),
            src_alphabet: 26,
            tgt_alphabet: 20,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CopyTask {
    pub train: Corpus,
    pub valid: Corpus,
    /// Groups dropped because some retrieval missed the twin.
    pub rejected_groups: usize,
}

/// One target shared by two training twins and one validation sentence.
struct Group {
    sources: [String; 3],
    target: String,
}

fn distinct_letters(rng: &mut ChaCha8Rng, len: usize, alphabet: usize) -> Vec<u8> {
    let mut pool: Vec<u8> = (0..alphabet as u8).map(|i| b'a' + i).collect();
    pool.shuffle(rng);
    pool.truncate(len);
    pool
}

/// Replaces one letter with one not already in the sentence.
fn perturb(rng: &mut ChaCha8Rng, s: &[u8], alphabet: usize) -> Vec<u8> {
    let mut out = s.to_vec();
    let i = rng.gen_range(0..out.len());
    let unused: Vec<u8> = (0..alphabet as u8).map(|k| b'a' + k).filter(|c| !s.contains(c)).collect();
    out[i] = *unused.choose(rng).expect("alphabet larger than sentence");
    out
}

fn ascii(x: Vec<u8>) -> String {
    String::from_utf8(x).expect("ascii")
}

fn into_corpus(
    pairs: &[(String, String)],
    per_doc: usize,
    prefix: &str,
    vocab: &Vocabulary,
    split: Split,
) -> Result<Corpus> {
    let src: Vec<&str> = pairs.iter().map(|p| p.0.as_str()).collect();
    let tgt: Vec<&str> = pairs.iter().map(|p| p.1.as_str()).collect();
    let ranges: Vec<DocRange> = (0..pairs.len())
        .step_by(per_doc)
        .enumerate()
        .map(|(d, start)| DocRange {
            doc_id: format!("{prefix}{d:04}"),
            start,
            end: (start + per_doc).min(pairs.len()),
        })
        .collect();
    encode_corpus(&RawCorpus::from_lines(&src, &tgt, &ranges, split)?, vocab)
}

/// A corpus where every target can only be recovered from the retrieved pair.
///
/// Each group holds two training twins and one validation sentence whose
/// sources differ in one letter and which share one random target unrelated to
/// the source. Groups where any retrieval misses the twin are dropped.
pub fn copy_task(config: &CopyTaskConfig, seed: u64) -> Result<CopyTask> {
    let (lo, hi) = config.src_len;
    let (tlo, thi) = config.tgt_len;
    if lo == 0 || lo > hi || hi >= config.src_alphabet || config.src_alphabet > 26 {
        return Err(SmdtError::InvalidArgument("invalid copy-task source bounds".into()));
    }
    if tlo == 0 || tlo > thi || config.tgt_alphabet == 0 || config.tgt_alphabet > 26 {
        return Err(SmdtError::InvalidArgument("invalid copy-task target bounds".into()));
    }
    if config.sentences_per_doc == 0 || config.groups == 0 {
        return Err(SmdtError::InvalidArgument("copy task needs groups and documents".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups: Vec<Group> = (0..config.groups)
        .map(|_| {
            let len = rng.gen_range(lo..=hi);
            let a = distinct_letters(&mut rng, len, config.src_alphabet);
            let b = perturb(&mut rng, &a, config.src_alphabet);
            let v = perturb(&mut rng, &a, config.src_alphabet);
            let tlen = rng.gen_range(tlo..=thi);
            let t = (0..tlen).map(|_| b'A' + rng.gen_range(0..config.tgt_alphabet as u8)).collect();
            Group {
                sources: [ascii(a), ascii(b), ascii(v)],
                target: ascii(t),
            }
        })
        .collect();

    let alphabet: String = (0..config.src_alphabet as u8)
        .map(|i| char::from(b'a' + i))
        .chain((0..config.tgt_alphabet as u8).map(|i| char::from(b'A' + i)))
        .collect();
    let vocab = Vocabulary::learn([alphabet.as_str()], 0)?;

    let before = groups.len();
    let order_seed: u64 = rng.gen();
    loop {
        let mut train_pairs: Vec<(usize, String, String)> = groups
            .iter()
            .enumerate()
            .flat_map(|(i, g)| [0, 1].map(|k| (i, g.sources[k].clone(), g.target.clone())))
            .collect();
        train_pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(order_seed));
        let owners: Vec<usize> = train_pairs.iter().map(|p| p.0).collect();
        let train_pairs: Vec<(String, String)> = train_pairs.into_iter().map(|p| (p.1, p.2)).collect();
        let valid_pairs: Vec<(String, String)> =
            groups.iter().map(|g| (g.sources[2].clone(), g.target.clone())).collect();
        let train = into_corpus(&train_pairs, config.sentences_per_doc, "train", &vocab, Split::Train)?;
        let valid = into_corpus(&valid_pairs, config.sentences_per_doc, "valid", &vocab, Split::Valid)?;

        let index = TmIndex::build(&train, DEFAULT_K1, DEFAULT_B)?;
        let mut keep = vec![true; groups.len()];
        let train_hits = index.retrieve_corpus(&train, true, Execution::default());
        for ((p, hit), &g) in train.pairs().zip(&train_hits).zip(&owners) {
            keep[g] &= hit.retrieved_tgt == p.tgt_tokens;
        }
        let valid_hits = index.retrieve_corpus(&valid, false, Execution::default());
        for (g, (p, hit)) in valid.pairs().zip(&valid_hits).enumerate() {
            keep[g] &= hit.retrieved_tgt == p.tgt_tokens;
        }
        if keep.iter().all(|&k| k) {
            return Ok(CopyTask {
                train,
                valid,
                rejected_groups: before - groups.len(),
            });
        }
        let mut it = keep.into_iter();
        groups.retain(|_| it.next().unwrap());
        if groups.len() < 2 {
            return Err(SmdtError::InvalidArgument("copy task filtered down to nothing".into()));
        }
    }
}
