use std::collections::HashMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const EOS: usize = 0;
pub const UNK: usize = 1;
pub const PAD: usize = 2;

pub const EOS_TOKEN: &str = "</s>";
pub const UNK_TOKEN: &str = "<unk>";
pub const PAD_TOKEN: &str = "<pad>";

pub const RESERVED: [&str; 3] = [EOS_TOKEN, UNK_TOKEN, PAD_TOKEN];

/// Token ↔ index bijection. Indices 0, 1, 2 are always end-of-sentence,
/// unknown and padding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_tokens(std::iter::empty::<String>()).expect("reserved tokens are distinct")
    }
}

impl Vocabulary {
    /// Builds a vocabulary from non-reserved tokens in the given order.
    pub fn from_tokens<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut v = Self { tokens: Vec::new(), index: HashMap::new() };
        for t in RESERVED {
            v.insert(t.to_string())?;
        }
        for t in tokens {
            v.insert(t.into())?;
        }
        Ok(v)
    }

    fn insert(&mut self, t: String) -> Result<()> {
        if self.index.contains_key(&t) {
            return Err(Error::InvalidArgument(format!("duplicate vocabulary token {t:?}")));
        }
        self.index.insert(t.clone(), self.tokens.len());
        self.tokens.push(t);
        Ok(())
    }

    /// Counts tokens and keeps those seen at least `min_count` times, most
    /// frequent first (ties broken lexicographically).
    pub fn build<'a, I, S>(sentences: I, min_count: usize) -> Self
    where
        I: IntoIterator<Item = &'a S>,
        S: AsRef<[String]> + 'a + ?Sized,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for s in sentences {
            for t in s.as_ref() {
                if !RESERVED.contains(&t.as_str()) {
                    *counts.entry(t.as_str()).or_default() += 1;
                }
            }
        }
        let mut kept: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_count.max(1)).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        Self::from_tokens(kept.into_iter().map(|(t, _)| t.to_string())).expect("counted tokens are distinct")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Index of `token`, or [`UNK`].
    pub fn index_of(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK)
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Maps tokens to indices (unknowns → [`UNK`]) and appends [`EOS`].
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.index_of(t.as_ref())).chain(std::iter::once(EOS)).collect()
    }

    /// Maps indices back to tokens, stopping at the first [`EOS`].
    pub fn decode(&self, indices: &[usize]) -> Vec<String> {
        indices
            .iter()
            .take_while(|&&i| i != EOS)
            .map(|&i| self.token(i).unwrap_or(UNK_TOKEN).to_string())
            .collect()
    }

    /// Newline-delimited tokens; the first three lines are the reserved header.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < 3 || lines[..3] != RESERVED {
            return Err(Error::InvalidArgument(format!(
                "vocabulary must start with the reserved header {RESERVED:?}"
            )));
        }
        Self::from_tokens(lines[3..].iter().map(|s| s.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path.as_ref(), self.to_text()).map_err(|e| Error::io(path.as_ref(), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        Self::from_text(&text)
    }

    /// Hex SHA-256 of the serialized vocabulary.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
