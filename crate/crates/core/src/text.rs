//! Caption cleaning, whitespace vocabulary and fixed-length encoding.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const SPECIAL_TOKENS: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

// Anything that is not a letter, combining mark, digit or whitespace.
// Marks must survive: Tamil vowel signs and the virama are category M.
static NON_WORD: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"[^\p{L}\p{M}\p{N}\s]+").expect("valid regex"));

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StopWords(HashSet<String>);

impl StopWords {
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self(words.into_iter().map(Into::into).collect())
    }

    /// One token per line; blank lines are ignored.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::input(path, e))?;
        Ok(Self::new(
            text.lines().map(str::trim).filter(|l| !l.is_empty()),
        ))
    }

    pub fn contains(&self, word: &str) -> bool {
        self.0.contains(word)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Sorted, for stable serialization.
    pub fn to_sorted_vec(&self) -> Vec<String> {
        let mut words: Vec<String> = self.0.iter().cloned().collect();
        words.sort();
        words
    }
}

/// Drops punctuation and symbols, collapses whitespace and removes stopwords.
/// Script and case are left alone.
pub fn clean_caption(text: &str, stopwords: &StopWords) -> String {
    let stripped = NON_WORD.replace_all(text, " ");
    stripped
        .split_whitespace()
        .filter(|w| !stopwords.contains(w))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Token ↔ id map. Ids 0..4 are the reserved special tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Whitespace tokens with frequency ≥ `min_freq`, most frequent first,
    /// ties in lexicographic order.
    pub fn build<S: AsRef<str>>(corpus: &[S], min_freq: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Empty("corpus"));
        }
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for line in corpus {
            for tok in line.as_ref().split_whitespace() {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(tok, n)| *n >= min_freq && !SPECIAL_TOKENS.contains(tok))
            .collect();
        // BTreeMap order is lexicographic, and the sort is stable.
        ranked.sort_by(|a, b| b.1.cmp(&a.1));
        Self::from_tokens(
            SPECIAL_TOKENS
                .iter()
                .copied()
                .chain(ranked.into_iter().map(|(t, _)| t))
                .map(String::from)
                .collect(),
        )
    }

    /// Tokens in id order; the first four must be the reserved tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIAL_TOKENS.len()
            || tokens[..SPECIAL_TOKENS.len()] != SPECIAL_TOKENS
        {
            return Err(Error::InvalidArgument(
                "vocabulary must start with [PAD] [UNK] [CLS] [SEP]".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), id).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "duplicate vocabulary token `{tok}`"
                )));
            }
        }
        Ok(Self { tokens, index })
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

    /// Id of `token`, or [`UNK`].
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Writes `token<TAB>id` lines.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::new();
        for (id, tok) in self.tokens.iter().enumerate() {
            out.push_str(tok);
            out.push('\t');
            out.push_str(&id.to_string());
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::input(path, e))?;
        let mut tokens = Vec::new();
        for (line_no, line) in text.lines().enumerate() {
            let bad = || Error::input(path, format!("line {}: expected token<TAB>id", line_no + 1));
            let (tok, id) = line.rsplit_once('\t').ok_or_else(bad)?;
            let id: usize = id.parse().map_err(|_| bad())?;
            if id != tokens.len() {
                return Err(Error::input(
                    path,
                    format!("line {}: id {id} is not dense", line_no + 1),
                ));
            }
            tokens.push(tok.to_string());
        }
        Self::from_tokens(tokens).map_err(|e| Error::input(path, e))
    }
}

/// Fixed-length encoded caption.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    /// 1 for real tokens (including CLS/SEP), 0 for padding.
    pub attention_mask: Vec<u8>,
    /// Number of non-padding positions.
    pub original_length: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// `[CLS] tokens… [SEP]` then `[PAD]` up to `max_len`.
///
/// Tokens beyond `max_len - 2` are dropped from the tail; `[SEP]` is always
/// kept.
///
/// # Panics
///
/// If `max_len < 2`.
pub fn encode(text: &str, vocab: &Vocabulary, max_len: usize) -> TokenSequence {
    assert!(max_len >= 2, "max_len must leave room for [CLS] and [SEP]");
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    ids.extend(
        text.split_whitespace()
            .take(max_len - 2)
            .map(|tok| vocab.id(tok)),
    );
    ids.push(SEP);
    let original_length = ids.len();
    ids.resize(max_len, PAD);
    let mut attention_mask = vec![1u8; original_length];
    attention_mask.resize(max_len, 0);
    TokenSequence {
        ids,
        attention_mask,
        original_length,
    }
}

/// Content tokens of a sequence, without special tokens.
pub fn decode(seq: &TokenSequence, vocab: &Vocabulary) -> Vec<String> {
    seq.ids
        .iter()
        .zip(&seq.attention_mask)
        .filter(|(&id, &m)| m == 1 && id != CLS && id != SEP)
        .map(|(&id, _)| vocab.token(id).unwrap_or(SPECIAL_TOKENS[UNK]).to_string())
        .collect()
}
