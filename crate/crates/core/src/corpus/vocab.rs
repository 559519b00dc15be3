//! Joint source/target byte-pair vocabulary.
//!
//! Text is split into chunks of (leading whitespace + non-whitespace run), so
//! whitespace characters are ordinary symbols and concatenating decoded chunks
//! reproduces the input exactly. Merges never cross chunk boundaries.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SmdtError};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
/// Boundary between the document block and the translation-memory block.
pub const SEP: TokenId = 4;
/// Opens a retrieved source sentence.
pub const RS: TokenId = 5;
/// Opens a retrieved target sentence.
pub const RT: TokenId = 6;
pub const NUM_RESERVED: usize = 7;

pub const RESERVED: [(&str, &str); NUM_RESERVED] = [
    ("PAD", "<pad>"),
    ("BOS", "<s>"),
    ("EOS", "</s>"),
    ("UNK", "<unk>"),
    ("SEP", "<sep>"),
    ("RS", "<rs>"),
    ("RT", "<rt>"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    merges: Vec<(String, String)>,
    lookup: HashMap<String, TokenId>,
    ranks: HashMap<(TokenId, TokenId), (usize, TokenId)>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabFile {
    tokens: Vec<String>,
    merges: Vec<(String, String)>,
    reserved: BTreeMap<String, TokenId>,
}

impl Vocabulary {
    /// Learns `num_merges` merges over the given texts. The most frequent
    /// adjacent pair is merged first; ties go to the lexicographically smaller
    /// pair. Learning stops early once no adjacent pair remains.
    pub fn learn<'a, I>(texts: I, num_merges: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut chunk_counts: BTreeMap<&str, usize> = BTreeMap::new();
        let mut alphabet = BTreeSet::new();
        for text in texts {
            for chunk in chunks(text) {
                *chunk_counts.entry(chunk).or_insert(0) += 1;
            }
            alphabet.extend(text.chars());
        }
        if alphabet.is_empty() {
            return Err(SmdtError::Corpus(
                "cannot learn a vocabulary from an empty corpus".into(),
            ));
        }

        let mut words: Vec<(Vec<String>, usize)> = chunk_counts
            .into_iter()
            .map(|(c, n)| (c.chars().map(String::from).collect(), n))
            .collect();
        let mut merges = Vec::with_capacity(num_merges);
        for _ in 0..num_merges {
            let mut pair_counts: BTreeMap<(&str, &str), usize> = BTreeMap::new();
            for (symbols, n) in &words {
                for w in symbols.windows(2) {
                    *pair_counts.entry((&w[0], &w[1])).or_insert(0) += n;
                }
            }
            let mut best: Option<((&str, &str), usize)> = None;
            for (pair, n) in pair_counts {
                if best.map_or(true, |(_, b)| n > b) {
                    best = Some((pair, n));
                }
            }
            let Some(((l, r), _)) = best else { break };
            let (l, r) = (l.to_string(), r.to_string());
            for (symbols, _) in &mut words {
                merge_symbols(symbols, &l, &r);
            }
            merges.push((l, r));
        }

        let mut tokens: Vec<String> = RESERVED.iter().map(|(_, s)| s.to_string()).collect();
        tokens.extend(alphabet.into_iter().map(String::from));
        let mut seen: BTreeSet<String> = tokens[NUM_RESERVED..].iter().cloned().collect();
        for (l, r) in &merges {
            let joined = format!("{l}{r}");
            if seen.insert(joined.clone()) {
                tokens.push(joined);
            }
        }
        Vocabulary::from_parts(tokens, merges)
    }

    fn from_parts(tokens: Vec<String>, merges: Vec<(String, String)>) -> Result<Self> {
        if tokens.len() < NUM_RESERVED
            || tokens[..NUM_RESERVED]
                .iter()
                .zip(RESERVED.iter())
                .any(|(t, (_, s))| t != s)
        {
            return Err(SmdtError::Format(
                "vocabulary must start with the reserved tokens".into(),
            ));
        }
        let mut lookup = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate().skip(NUM_RESERVED) {
            if lookup.insert(t.clone(), i as TokenId).is_some() {
                return Err(SmdtError::Format(format!("duplicate vocabulary token {t:?}")));
            }
        }
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, (l, r)) in merges.iter().enumerate() {
            let id = |s: &str| {
                lookup
                    .get(s)
                    .copied()
                    .ok_or_else(|| SmdtError::Format(format!("merge references unknown token {s:?}")))
            };
            let key = (id(l)?, id(r)?);
            let joined = id(&format!("{l}{r}"))?;
            ranks.entry(key).or_insert((rank, joined));
        }
        Ok(Vocabulary {
            tokens,
            merges,
            lookup,
            ranks,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Id of a non-reserved symbol.
    pub fn id(&self, symbol: &str) -> Option<TokenId> {
        self.lookup.get(symbol).copied()
    }

    /// Greedy BPE: within each chunk, repeatedly merge every occurrence of the
    /// lowest-ranked adjacent pair. Characters outside the alphabet become UNK.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut out = Vec::new();
        let mut buf = [0u8; 4];
        for chunk in chunks(text) {
            let mut ids: Vec<TokenId> = chunk
                .chars()
                .map(|c| self.id(c.encode_utf8(&mut buf)).unwrap_or(UNK))
                .collect();
            loop {
                let best = ids
                    .windows(2)
                    .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&(rank, _)| (rank, w[0], w[1])))
                    .min();
                let Some((_, l, r)) = best else { break };
                let joined = self.ranks[&(l, r)].1;
                let mut merged = Vec::with_capacity(ids.len());
                let mut i = 0;
                while i < ids.len() {
                    if i + 1 < ids.len() && ids[i] == l && ids[i + 1] == r {
                        merged.push(joined);
                        i += 2;
                    } else {
                        merged.push(ids[i]);
                        i += 1;
                    }
                }
                ids = merged;
            }
            out.extend(ids);
        }
        out
    }

    /// Concatenates token strings. Reserved control tokens are dropped; UNK
    /// renders as `<unk>`.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let mut s = String::new();
        for &id in ids {
            if id == UNK {
                s.push_str(RESERVED[UNK as usize].1);
            } else if (id as usize) >= NUM_RESERVED {
                if let Some(t) = self.token(id) {
                    s.push_str(t);
                }
            }
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        let file = VocabFile {
            tokens: self.tokens.clone(),
            merges: self.merges.clone(),
            reserved: RESERVED
                .iter()
                .enumerate()
                .map(|(i, (name, _))| (name.to_string(), i as TokenId))
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(json)?;
        for (i, (name, _)) in RESERVED.iter().enumerate() {
            if file.reserved.get(*name) != Some(&(i as TokenId)) {
                return Err(SmdtError::Format(format!(
                    "reserved token {name} must have id {i}"
                )));
            }
        }
        if file.reserved.len() != NUM_RESERVED {
            return Err(SmdtError::Format("unexpected reserved token entries".into()));
        }
        Vocabulary::from_parts(file.tokens, file.merges)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Vocabulary::from_json(&std::fs::read_to_string(path)?)
    }
}

fn merge_symbols(symbols: &mut Vec<String>, l: &str, r: &str) {
    if symbols.len() < 2 {
        return;
    }
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == l && symbols[i + 1] == r {
            out.push(format!("{l}{r}"));
            i += 2;
        } else {
            out.push(std::mem::take(&mut symbols[i]));
            i += 1;
        }
    }
    *symbols = out;
}

/// Splits text into chunks of leading whitespace followed by a non-whitespace
/// run. Trailing whitespace forms its own chunk.
fn chunks(text: &str) -> impl Iterator<Item = &str> {
    let mut rest = text;
    std::iter::from_fn(move || {
        if rest.is_empty() {
            return None;
        }
        let ws_end = rest
            .char_indices()
            .find(|(_, c)| !c.is_whitespace())
            .map_or(rest.len(), |(i, _)| i);
        let word_end = rest[ws_end..]
            .char_indices()
            .find(|(_, c)| c.is_whitespace())
            .map_or(rest.len(), |(i, _)| ws_end + i);
        let (chunk, tail) = rest.split_at(word_end);
        rest = tail;
        Some(chunk)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn strs(v: &Vocabulary, ids: &[TokenId]) -> Vec<String> {
        ids.iter().map(|&i| v.token(i).unwrap().to_string()).collect()
    }

    #[test]
    fn chunking_keeps_every_character() {
        let text = "  ab c\td  ";
        let parts: Vec<&str> = chunks(text).collect();
        assert_eq!(parts, vec!["  ab", " c", "\td", "  "]);
        assert_eq!(parts.concat(), text);
    }

    #[test]
    fn zero_merges_is_character_level() {
        let v = Vocabulary::learn(["ba", "ab c"], 0).unwrap();
        assert_eq!(v.len(), NUM_RESERVED + 4);
        assert_eq!(&v.tokens()[NUM_RESERVED..], &[" ", "a", "b", "c"]);
        assert!(v.merges().is_empty());
    }

    #[test]
    fn single_merge_on_toy_corpus() {
        let v = Vocabulary::learn(["aaab aaab"], 1).unwrap();
        assert_eq!(v.merges(), &[("a".to_string(), "a".to_string())]);
        assert_eq!(strs(&v, &v.encode("aaab")), vec!["aa", "a", "b"]);
    }

    #[test]
    fn ties_break_lexicographically() {
        // ("a","b") and ("c","d") both occur twice.
        let v = Vocabulary::learn(["ab cd", "cd ab"], 1).unwrap();
        assert_eq!(v.merges(), &[("a".to_string(), "b".to_string())]);
    }

    #[test]
    fn unknown_characters_become_unk() {
        let v = Vocabulary::learn(["abc"], 2).unwrap();
        let ids = v.encode("abz");
        assert!(ids.contains(&UNK));
        assert!(v.encode("").is_empty());
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(Vocabulary::learn(std::iter::empty(), 3).is_err());
        assert!(Vocabulary::learn([""], 3).is_err());
    }

    #[test]
    fn reserved_strings_in_text_are_not_reserved_ids() {
        let v = Vocabulary::learn(["<pad> <s> </s>"], 50).unwrap();
        let ids = v.encode("<pad>");
        assert!(ids.iter().all(|&i| i as usize >= NUM_RESERVED));
        assert_eq!(v.decode(&ids), "<pad>");
    }

    #[test]
    fn json_round_trip() {
        let v = Vocabulary::learn(["the cat sat", "die katze sass"], 10).unwrap();
        let back = Vocabulary::from_json(&v.to_json().unwrap()).unwrap();
        assert_eq!(v, back);
        assert_eq!(back.encode("the katze"), v.encode("the katze"));
    }

    #[test]
    fn json_with_wrong_reserved_ids_is_rejected() {
        let v = Vocabulary::learn(["ab"], 0).unwrap();
        let json = v.to_json().unwrap().replace("\"SEP\": 4", "\"SEP\": 5");
        assert!(Vocabulary::from_json(&json).is_err());
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(
            corpus in proptest::collection::vec("[a-e ]{1,12}", 1..6),
            merges in 0usize..20,
            picks in proptest::collection::vec(0usize..1000, 0..30),
        ) {
            let v = Vocabulary::learn(corpus.iter().map(String::as_str), merges).unwrap();
            let alphabet: Vec<char> = corpus.concat().chars().collect::<BTreeSet<_>>().into_iter().collect();
            let s: String = picks.iter().map(|&p| alphabet[p % alphabet.len()]).collect();
            let ids = v.encode(&s);
            prop_assert!(ids.iter().all(|&i| i as usize >= NUM_RESERVED));
            prop_assert_eq!(v.decode(&ids), s);
        }

        #[test]
        fn learning_is_deterministic(corpus in proptest::collection::vec("[a-d ]{1,10}", 1..5)) {
            let a = Vocabulary::learn(corpus.iter().map(String::as_str), 8).unwrap();
            let b = Vocabulary::learn(corpus.iter().map(String::as_str), 8).unwrap();
            prop_assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        }
    }
}
