//! Token vocabularies and fixed-length sequence framing.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const SEP: &str = "<sep>";
pub const UNK: &str = "<unk>";

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const SEP_ID: usize = 3;
pub const UNK_ID: usize = 4;

/// Reserved tokens, in id order.
pub const SPECIALS: [&str; 5] = [PAD, BOS, EOS, SEP, UNK];
pub const N_SPECIALS: usize = SPECIALS.len();

pub fn is_special_id(id: usize) -> bool {
    id < N_SPECIALS
}

/// Bidirectional token/id map. Ids are dense and the five specials always
/// occupy ids 0..5.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: BTreeMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::specials_only()
    }
}

impl Vocabulary {
    pub fn specials_only() -> Self {
        let id_to_token: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary {
            token_to_id,
            id_to_token,
        }
    }

    /// Specials first, then corpus tokens in first-seen order.
    pub fn build<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut vocab = Self::specials_only();
        for tok in tokens {
            let tok = tok.as_ref();
            if SPECIALS.contains(&tok) {
                return Err(Error::Corpus(tok.to_string()));
            }
            vocab.insert(tok)?;
        }
        Ok(vocab)
    }

    fn insert(&mut self, tok: &str) -> Result<usize> {
        if let Some(&id) = self.token_to_id.get(tok) {
            return Ok(id);
        }
        if tok.is_empty() || tok.contains(['\n', '\r']) {
            return Err(Error::Validation(alloc::format!(
                "token {tok:?} is empty or spans lines"
            )));
        }
        let id = self.id_to_token.len();
        self.id_to_token.push(tok.to_string());
        self.token_to_id.insert(tok.to_string(), id);
        Ok(id)
    }

    /// Rebuilds a vocabulary from its id-ordered token list, checking the
    /// reserved prefix and uniqueness.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < N_SPECIALS || tokens[..N_SPECIALS].iter().zip(SPECIALS).any(|(a, b)| a != b)
        {
            return Err(Error::Validation(
                "vocabulary must start with <pad>, <bos>, <eos>, <sep>, <unk>".into(),
            ));
        }
        let mut vocab = Self::specials_only();
        for tok in &tokens[N_SPECIALS..] {
            if vocab.token_to_id.contains_key(tok.as_str()) {
                return Err(Error::Validation(alloc::format!("duplicate token {tok:?}")));
            }
            vocab.insert(tok)?;
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, tok: &str) -> Option<usize> {
        self.token_to_id.get(tok).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// Maps tokens to ids, padding or truncating to exactly `max_len`.
    /// Unknown tokens become `<unk>`.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S], max_len: usize) -> Result<EncodedSequence> {
        if max_len < 2 {
            return Err(Error::Param(alloc::format!("max_len must be >= 2, got {max_len}")));
        }
        let mut ids: Vec<usize> = tokens
            .iter()
            .take(max_len)
            .map(|t| self.id(t.as_ref()).unwrap_or(UNK_ID))
            .collect();
        let true_length = ids.len();
        ids.resize(max_len, PAD_ID);
        Ok(EncodedSequence { ids, true_length })
    }

    /// Inverse of `encode`. With `strip_specials`, reserved ids are dropped
    /// and decoding stops at the first `<eos>`.
    pub fn decode(&self, ids: &[usize], strip_specials: bool) -> Result<Vec<String>> {
        let mut out = Vec::new();
        for &id in ids {
            let tok = self.token(id).ok_or(Error::Index {
                what: "token id",
                index: id,
                size: self.len(),
            })?;
            if strip_specials {
                if id == EOS_ID {
                    break;
                }
                if is_special_id(id) {
                    continue;
                }
            }
            out.push(tok.to_string());
        }
        Ok(out)
    }
}

/// Ids padded to a fixed length, plus how many were real tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedSequence {
    pub ids: Vec<usize>,
    pub true_length: usize,
}
