//! Whitespace-token vocabulary shared by encoder and decoder.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
/// Separator inserted between a query and its document.
pub const SEP: usize = 4;

const SPECIALS: [&str; 5] = ["<pad>", "<s>", "</s>", "<unk>", "<sep>"];

/// Token table with the five reserved specials at fixed low ids.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary from whitespace tokens of `texts`, sorted for
    /// determinism, plus `extra_tokens` reserved up front (e.g. marker words
    /// a later task will rely on).
    pub fn from_corpus<'a>(
        texts: impl IntoIterator<Item = &'a str>,
        extra_tokens: &[String],
    ) -> Self {
        let mut seen: Vec<String> = Vec::new();
        let mut have: HashMap<String, ()> = HashMap::new();
        for t in extra_tokens {
            if !SPECIALS.contains(&t.as_str()) && have.insert(t.clone(), ()).is_none() {
                seen.push(t.clone());
            }
        }
        for text in texts {
            for tok in text.split_whitespace() {
                if SPECIALS.contains(&tok) {
                    continue;
                }
                if have.insert(tok.to_string(), ()).is_none() {
                    seen.push(tok.to_string());
                }
            }
        }
        seen.sort();
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(seen);
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { tokens, index }
    }

    /// Restores the lookup index after deserialization.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::data("vocab does not start with the reserved specials"));
        }
        let index: HashMap<String, usize> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        if index.len() != tokens.len() {
            return Err(Error::data("vocab contains duplicate tokens"));
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // specials are always present
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        *self.index.get(token).unwrap_or(&UNK)
    }

    /// Whitespace-tokenizes and maps to ids; unknown words become `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|t| self.id(t)).collect()
    }

    /// Joins ids back into text, dropping structural specials.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id == PAD || id == BOS || id == EOS {
                continue;
            }
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(self.tokens.get(id).map_or("<unk>", String::as_str));
        }
        out
    }
}
