use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
/// Slot reserved for a point token in the LM input sequence.
pub const PT: usize = 4;
pub const AFF: usize = 5;

pub const AFF_TOKEN: &str = "<AFF>";
pub const SPECIALS: [&str; 6] = ["<pad>", "<unk>", "<bos>", "<eos>", "<pt>", AFF_TOKEN];

const NO_SPACE_BEFORE: [&str; 6] = [",", ".", "?", "!", ";", ":"];

/// Word-level vocabulary: the special tokens first, then corpus words sorted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

/// Splits text into lowercase word and punctuation pieces. Words keep
/// inner hyphens and apostrophes; `<AFF>` is recognized in any case.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    let chars: Vec<char> = text.chars().collect();
    let mut i = 0;
    let flush = |word: &mut String, out: &mut Vec<String>| {
        if !word.is_empty() {
            out.push(std::mem::take(word));
        }
    };
    while i < chars.len() {
        let c = chars[i];
        if c == '<' && i + 5 <= chars.len() {
            let lit: String = chars[i..i + 5].iter().collect();
            if lit.eq_ignore_ascii_case(AFF_TOKEN) {
                flush(&mut word, &mut out);
                out.push(AFF_TOKEN.to_string());
                i += 5;
                continue;
            }
        }
        if c.is_alphanumeric() || ((c == '-' || c == '\'') && !word.is_empty()) {
            word.extend(c.to_lowercase());
        } else {
            flush(&mut word, &mut out);
            if !c.is_whitespace() {
                out.push(c.to_string());
            }
        }
        i += 1;
    }
    flush(&mut word, &mut out);
    out
}

impl Vocabulary {
    pub fn from_corpus<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words = BTreeSet::new();
        for t in texts {
            words.extend(split_words(t));
        }
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(
            words
                .into_iter()
                .filter(|w| !SPECIALS.contains(&w.as_str())),
        );
        tokens.into()
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

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens
            .get(id)
            .map(String::as_str)
            .unwrap_or(SPECIALS[UNK])
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        split_words(text).iter().map(|w| self.id(w)).collect()
    }

    /// Inverse of `tokenize` on in-vocabulary lowercase text. Padding, BOS,
    /// EOS and point slots are dropped.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            if matches!(id, PAD | BOS | EOS | PT) {
                continue;
            }
            let tok = self.token(id);
            if !out.is_empty() && !NO_SPACE_BEFORE.contains(&tok) {
                out.push(' ');
            }
            out.push_str(tok);
        }
        out
    }

    /// SHA-256 over the newline-joined token list, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}
