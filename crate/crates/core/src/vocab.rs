//! Closed attribute vocabulary and concept phrases.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Reserved id of the unconditional token; an empty phrase maps here.
pub const NULL_TOKEN: TokenId = 0;

const STANDARD_TOKENS: [&str; 12] = [
    "<null>", "small", "medium", "large", "dim", "bright", "red", "green", "blue", "circle",
    "square", "triangle",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

impl Vocabulary {
    /// Size, brightness, hue and shape words of the procedural dataset.
    pub fn standard() -> Self {
        Self {
            tokens: STANDARD_TOKENS.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(STANDARD_TOKENS[0]) {
            return Err(Error::Argument("vocabulary must start with <null>".into()));
        }
        Ok(Self { tokens })
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

    pub fn id(&self, word: &str) -> Result<TokenId> {
        self.tokens
            .iter()
            .position(|t| t == word)
            .map(|i| i as TokenId)
            .ok_or_else(|| Error::UnknownToken(word.to_string()))
    }

    pub fn word(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Parses a whitespace-separated phrase such as `"large circle"`.
    pub fn phrase(&self, text: &str) -> Result<Phrase> {
        let ids = text
            .split_whitespace()
            .map(|w| self.id(w))
            .collect::<Result<Vec<_>>>()?;
        Ok(Phrase::new(ids))
    }

    pub fn phrase_from_words<S: AsRef<str>>(&self, words: &[S]) -> Result<Phrase> {
        let ids = words
            .iter()
            .map(|w| self.id(w.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Phrase::new(ids))
    }

    pub fn render(&self, phrase: &Phrase) -> String {
        if phrase.is_null() {
            return String::new();
        }
        phrase
            .ids()
            .iter()
            .map(|id| self.word(*id).unwrap_or("?"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::standard()
    }
}

/// An ordered list of token ids. The empty phrase is the unconditional case.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Phrase(Vec<TokenId>);

impl Phrase {
    pub fn new(ids: Vec<TokenId>) -> Self {
        Phrase(ids.into_iter().filter(|id| *id != NULL_TOKEN).collect())
    }

    pub fn null() -> Self {
        Phrase(Vec::new())
    }

    pub fn is_null(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    /// Tokens fed to the embedding table; `[NULL]` for the empty phrase.
    pub fn embedding_ids(&self) -> Vec<TokenId> {
        if self.0.is_empty() {
            vec![NULL_TOKEN]
        } else {
            self.0.clone()
        }
    }

    /// `(c, p)`: tokens of `self` followed by tokens of `other`.
    pub fn concat(&self, other: &Phrase) -> Phrase {
        let mut ids = self.0.clone();
        ids.extend_from_slice(&other.0);
        Phrase(ids)
    }

    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        match self.0.iter().find(|id| **id as usize >= vocab.len()) {
            Some(id) => Err(Error::UnknownToken(format!("#{id}"))),
            None => Ok(()),
        }
    }
}

impl fmt::Display for Phrase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ids: Vec<String> = self.0.iter().map(|i| i.to_string()).collect();
        write!(f, "[{}]", ids.join(","))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_renders() {
        let v = Vocabulary::standard();
        let p = v.phrase("large circle").unwrap();
        assert_eq!(p.ids(), &[3, 9]);
        assert_eq!(v.render(&p), "large circle");
        assert!(v.phrase("huge").is_err());
        assert!(v.phrase("").unwrap().is_null());
    }

    #[test]
    fn null_phrase_embeds_as_null_token() {
        assert_eq!(Phrase::null().embedding_ids(), vec![NULL_TOKEN]);
        assert!(Phrase::new(vec![NULL_TOKEN]).is_null());
    }

    #[test]
    fn concat_orders_tokens() {
        let v = Vocabulary::standard();
        let a = v.phrase("large").unwrap();
        let b = v.phrase("square").unwrap();
        assert_eq!(v.render(&a.concat(&b)), "large square");
        assert_ne!(a.concat(&b), b.concat(&a));
        assert_eq!(Phrase::null().concat(&b), b);
    }
}
