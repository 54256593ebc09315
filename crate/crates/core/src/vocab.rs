//! Word-level vocabulary and fixed-length id encoding.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffscript::ACTION_MARKERS;
use crate::error::{invalid, Error, Result};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const BOS_ID: usize = 2;
pub const EOS_ID: usize = 3;

/// Control tokens followed by the nine action markers; these take ids 0..13.
pub const SPECIALS: [&str; 13] = [
    PAD,
    UNK,
    BOS,
    EOS,
    ACTION_MARKERS[0],
    ACTION_MARKERS[1],
    ACTION_MARKERS[2],
    ACTION_MARKERS[3],
    ACTION_MARKERS[4],
    ACTION_MARKERS[5],
    ACTION_MARKERS[6],
    ACTION_MARKERS[7],
    ACTION_MARKERS[8],
];

pub const DEFAULT_MAX_SIZE: usize = 16_384;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenIds {
    pub ids: Vec<usize>,
    pub attention_mask: Vec<u8>,
}

impl TokenIds {
    /// Number of unmasked positions.
    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }

    /// The ids at unmasked positions.
    pub fn real_ids(&self) -> Vec<usize> {
        self.ids
            .iter()
            .zip(&self.attention_mask)
            .filter(|(_, &m)| m == 1)
            .map(|(&i, _)| i)
            .collect()
    }
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(invalid!("vocabulary must start with the {} special tokens", SPECIALS.len()));
        }
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if token_to_id.insert(t.clone(), i).is_some() {
                return Err(invalid!("duplicate vocabulary token {t:?}"));
            }
        }
        Ok(Self {
            id_to_token: tokens,
            token_to_id,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// Hex SHA-256 of the vocabulary file contents.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_file_string().as_bytes()))
    }

    fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in &self.id_to_token {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(String::from).collect())
    }
}

/// Specials, then tokens with count ≥ `min_freq` ordered by descending count
/// and then lexicographically, cut off at `max_size` entries in total.
/// Tokens containing whitespace are skipped since the file format is
/// line-based.
pub fn build_vocab<'a, I, S>(corpora: I, min_freq: usize, max_size: usize) -> Result<Vocab>
where
    I: IntoIterator<Item = &'a S>,
    S: AsRef<[String]> + 'a + ?Sized,
{
    if min_freq == 0 {
        return Err(invalid!("min_freq must be at least 1"));
    }
    if max_size < SPECIALS.len() {
        return Err(invalid!("max_size must be at least {}", SPECIALS.len()));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for seq in corpora {
        for t in seq.as_ref() {
            *counts.entry(t.as_str()).or_default() += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(t, c)| {
            *c >= min_freq && !SPECIALS.contains(t) && !t.is_empty() && !t.contains(char::is_whitespace)
        })
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    tokens.extend(ranked.into_iter().take(max_size - SPECIALS.len()).map(|(t, _)| t.to_string()));
    Vocab::from_tokens(tokens)
}

/// Maps tokens to ids, optionally wrapping with `<bos>`/`<eos>`, truncating
/// the tail (keeping `<eos>` last) and padding to `max_len`.
pub fn encode(tokens: &[String], vocab: &Vocab, max_len: usize, add_bos_eos: bool) -> Result<TokenIds> {
    if add_bos_eos && max_len < 2 {
        return Err(invalid!("max_len must be at least 2 with bos/eos"));
    }
    let mut ids = Vec::with_capacity(max_len);
    if add_bos_eos {
        ids.push(BOS_ID);
    }
    ids.extend(tokens.iter().map(|t| vocab.id(t).unwrap_or(UNK_ID)));
    if add_bos_eos {
        ids.push(EOS_ID);
    }
    if ids.len() > max_len {
        ids.truncate(max_len);
        if add_bos_eos {
            ids[max_len - 1] = EOS_ID;
        }
    }
    let real = ids.len();
    ids.resize(max_len, PAD_ID);
    let attention_mask = (0..max_len).map(|i| u8::from(i < real)).collect();
    Ok(TokenIds { ids, attention_mask })
}

/// Tokens up to the first `<eos>`, without `<pad>` and `<bos>`.
pub fn decode(ids: &[usize], vocab: &Vocab) -> Result<Vec<String>> {
    if let Some(&bad) = ids.iter().find(|&&i| i >= vocab.len()) {
        return Err(invalid!("id {bad} out of range for vocabulary of {}", vocab.len()));
    }
    Ok(ids
        .iter()
        .take_while(|&&i| i != EOS_ID)
        .filter(|&&i| i != PAD_ID && i != BOS_ID)
        .map(|&i| vocab.id_to_token[i].clone())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn empty_corpus_gives_specials() {
        let v = build_vocab(std::iter::empty::<&Vec<String>>(), 1, 100).unwrap();
        assert_eq!(v.len(), 13);
        assert_eq!(v.id("<keep>"), Some(4));
        assert_eq!(v.id("<replace_end>"), Some(12));
        assert_eq!(v.token(EOS_ID), Some(EOS));
    }

    #[test]
    fn frequency_and_tie_rules() {
        let c = [toks("a a b")];
        let v = build_vocab(&c, 2, 20).unwrap();
        assert_eq!(&v.tokens()[13..], &toks("a"));
        let c = [toks("b a b a")];
        let v = build_vocab(&c, 1, 14).unwrap();
        assert_eq!(&v.tokens()[13..], &toks("a"));
    }

    #[test]
    fn encode_examples() {
        let v = build_vocab(&[toks("fix bug")], 1, 100).unwrap();
        let e = encode(&[], &v, 4, true).unwrap();
        assert_eq!(e.ids, vec![BOS_ID, EOS_ID, PAD_ID, PAD_ID]);
        assert_eq!(e.attention_mask, vec![1, 1, 0, 0]);
        let e = encode(&toks("zzz-not-in-vocab"), &v, 3, false).unwrap();
        assert!(e.ids.contains(&UNK_ID));
        let long: Vec<String> = (0..10).map(|_| "fix".to_string()).collect();
        let e = encode(&long, &v, 5, false).unwrap();
        assert_eq!(e.ids, vec![v.id("fix").unwrap(); 5]);
        assert_eq!(e.attention_mask, vec![1; 5]);
        let e = encode(&long, &v, 5, true).unwrap();
        assert_eq!(e.ids[0], BOS_ID);
        assert_eq!(e.ids[4], EOS_ID);
    }

    #[test]
    fn decode_examples() {
        let v = build_vocab(&[toks("fix bug a b")], 1, 100).unwrap();
        let e = encode(&toks("fix bug"), &v, 6, true).unwrap();
        assert_eq!(decode(&e.ids, &v).unwrap(), toks("fix bug"));
        assert!(decode(&[PAD_ID; 4], &v).unwrap().is_empty());
        let (a, b) = (v.id("a").unwrap(), v.id("b").unwrap());
        assert_eq!(decode(&[BOS_ID, a, EOS_ID, b, PAD_ID], &v).unwrap(), toks("a"));
        assert!(decode(&[v.len()], &v).is_err());
    }

    #[test]
    fn file_round_trip_and_hash() {
        let v = build_vocab(&[toks("x y y")], 1, 100).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        v.save(&p).unwrap();
        let back = Vocab::load(&p).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.hash(), v.hash());
        assert_eq!(v.hash().len(), 64);
    }

    proptest! {
        #[test]
        fn encode_decode_identity(words in proptest::collection::vec("[a-e]{1,3}", 0..10), extra in 0usize..5) {
            let v = build_vocab(&[words.clone()], 1, 1000).unwrap();
            let max_len = words.len() + 2 + extra;
            let e = encode(&words, &v, max_len, true).unwrap();
            prop_assert_eq!(decode(&e.ids, &v).unwrap(), words);
        }

        #[test]
        fn mask_invariants(words in proptest::collection::vec("[a-z]{1,4}", 0..30), max_len in 2usize..20, bos in any::<bool>()) {
            let v = build_vocab(&[words[..words.len() / 2].to_vec()], 1, 20).unwrap();
            let e = encode(&words, &v, max_len, bos).unwrap();
            prop_assert_eq!(e.ids.len(), max_len);
            prop_assert_eq!(e.attention_mask.len(), max_len);
            for (&id, &m) in e.ids.iter().zip(&e.attention_mask) {
                prop_assert!(id < v.len());
                if m == 0 { prop_assert_eq!(id, PAD_ID); }
            }
            // Real positions form a prefix.
            let real = e.real_len();
            prop_assert!(e.attention_mask[..real].iter().all(|&m| m == 1));
        }

        #[test]
        fn build_is_deterministic(words in proptest::collection::vec("[a-f]{1,2}", 0..40), min_freq in 1usize..3, max_size in 13usize..20) {
            let a = build_vocab(&[words.clone()], min_freq, max_size).unwrap();
            let b = build_vocab(&[words], min_freq, max_size).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
