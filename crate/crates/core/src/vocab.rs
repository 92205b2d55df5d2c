//! Closed token alphabet shared by every sequence in the system.
//!
//! Five structural markers are always present. Tokens whose name starts with
//! `db:` are database-result tokens: they are inserted deterministically during
//! generation and are never emitted by a model.

use std::collections::HashMap;
use std::fmt;
use std::ops::Deref;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const SEP_B: &str = "<sep_b>";
pub const SEP_A: &str = "<sep_a>";
pub const SEP_DB: &str = "<sep_db>";
pub const DB_PREFIX: &str = "db:";

const SPECIALS: [&str; 5] = [BOS, EOS, SEP_B, SEP_A, SEP_DB];

/// A ragged sequence of vocabulary indices.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenSeq(pub Vec<TokenId>);

impl TokenSeq {
    pub fn new() -> Self {
        TokenSeq(Vec::new())
    }

    pub fn push(&mut self, id: TokenId) {
        self.0.push(id);
    }

    pub fn extend_from(&mut self, other: &[TokenId]) {
        self.0.extend_from_slice(other);
    }

    pub fn into_inner(self) -> Vec<TokenId> {
        self.0
    }
}

impl Deref for TokenSeq {
    type Target = [TokenId];
    fn deref(&self) -> &[TokenId] {
        &self.0
    }
}

impl std::borrow::Borrow<[TokenId]> for TokenSeq {
    fn borrow(&self) -> &[TokenId] {
        &self.0
    }
}

impl From<Vec<TokenId>> for TokenSeq {
    fn from(v: Vec<TokenId>) -> Self {
        TokenSeq(v)
    }
}

impl FromIterator<TokenId> for TokenSeq {
    fn from_iter<I: IntoIterator<Item = TokenId>>(iter: I) -> Self {
        TokenSeq(iter.into_iter().collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenClass {
    Special,
    Db,
    Content,
}

/// Ids of the structural markers, resolved once.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Markers {
    pub bos: TokenId,
    pub eos: TokenId,
    pub sep_b: TokenId,
    pub sep_a: TokenId,
    pub sep_db: TokenId,
}

impl Markers {
    /// Span separators are transparent to the tabular model's context key.
    pub fn is_separator(&self, id: TokenId) -> bool {
        id == self.sep_b || id == self.sep_a || id == self.sep_db
    }
}

#[derive(Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    classes: Vec<TokenClass>,
    markers: Markers,
}

impl fmt::Debug for Vocab {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Vocab")
            .field("len", &self.tokens.len())
            .field("hash", &self.hash_hex())
            .finish()
    }
}

impl Vocab {
    /// Builds a vocabulary from an ordered token list. Missing special markers
    /// are an error, as are duplicates.
    pub fn new<S: AsRef<str>>(tokens: impl IntoIterator<Item = S>) -> Result<Self> {
        let tokens: Vec<String> = tokens.into_iter().map(|t| t.as_ref().to_string()).collect();
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::InvalidInput(format!("bad token {t:?}")));
            }
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::InvalidInput(format!("duplicate token {t:?}")));
            }
        }
        let lookup = |s: &str| {
            index
                .get(s)
                .copied()
                .ok_or_else(|| Error::InvalidInput(format!("vocabulary lacks marker {s}")))
        };
        let markers = Markers {
            bos: lookup(BOS)?,
            eos: lookup(EOS)?,
            sep_b: lookup(SEP_B)?,
            sep_a: lookup(SEP_A)?,
            sep_db: lookup(SEP_DB)?,
        };
        let classes = tokens
            .iter()
            .map(|t| {
                if SPECIALS.contains(&t.as_str()) {
                    TokenClass::Special
                } else if t.starts_with(DB_PREFIX) {
                    TokenClass::Db
                } else {
                    TokenClass::Content
                }
            })
            .collect();
        Ok(Vocab {
            tokens,
            index,
            classes,
            markers,
        })
    }

    /// Specials first, then `content` in order.
    pub fn with_specials<S: AsRef<str>>(content: impl IntoIterator<Item = S>) -> Result<Self> {
        let all: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(content.into_iter().map(|s| s.as_ref().to_string()))
            .collect();
        Vocab::new(all)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn markers(&self) -> Markers {
        self.markers
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn class(&self, id: TokenId) -> TokenClass {
        self.classes[id as usize]
    }

    /// Tokens whose probability is fixed at one by the workflow (DB results and
    /// their terminator). They are skipped when scoring.
    pub fn is_forced(&self, id: TokenId) -> bool {
        id == self.markers.sep_db || self.classes[id as usize] == TokenClass::Db
    }

    /// Tokens a model may emit: everything except BOS and forced tokens.
    pub fn is_emittable(&self, id: TokenId) -> bool {
        id != self.markers.bos && !self.is_forced(id)
    }

    pub fn emittable_count(&self) -> usize {
        (0..self.len() as TokenId).filter(|&i| self.is_emittable(i)).count()
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Result<TokenSeq> {
        words
            .iter()
            .map(|w| {
                self.id(w.as_ref())
                    .ok_or_else(|| Error::InvalidInput(format!("unknown token {:?}", w.as_ref())))
            })
            .collect()
    }

    pub fn decode(&self, seq: &[TokenId]) -> Vec<String> {
        seq.iter().map(|&i| self.token(i).to_string()).collect()
    }

    pub fn check(&self, seq: &[TokenId]) -> Result<()> {
        match seq.iter().find(|&&i| i as usize >= self.len()) {
            Some(bad) => Err(Error::InvalidInput(format!(
                "token id {bad} out of range for vocabulary of {}",
                self.len()
            ))),
            None => Ok(()),
        }
    }

    pub fn hash_hex(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        h.finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// One token per line, order significant.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocab::new(text.lines().filter(|l| !l.is_empty()))
    }
}
