//! Whitespace-and-punctuation tokenizer over a closed vocabulary.
//!
//! A token is a run of alphanumeric characters (apostrophes included), a
//! single punctuation character, or one of the special markers. Each token
//! keeps the whitespace that preceded it, so [`detokenize`] is lossless.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

pub const CLS: &str = "[CLS]";
pub const UNK: &str = "[UNK]";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub leading: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenized {
    pub tokens: Vec<Token>,
    pub trailing: String,
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '\''
}

/// Splits `text`; occurrences of any `specials` are kept whole.
pub fn tokenize(text: &str, specials: &[&str]) -> Tokenized {
    let mut tokens = Vec::new();
    let mut leading = String::new();
    let mut rest = text;
    while let Some(c) = rest.chars().next() {
        if c.is_whitespace() {
            leading.push(c);
            rest = &rest[c.len_utf8()..];
            continue;
        }
        let len = if let Some(s) = specials.iter().find(|s| !s.is_empty() && rest.starts_with(**s)) {
            s.len()
        } else if is_word_char(c) {
            rest.find(|ch: char| !is_word_char(ch)).unwrap_or(rest.len())
        } else {
            c.len_utf8()
        };
        tokens.push(Token { text: rest[..len].to_owned(), leading: std::mem::take(&mut leading) });
        rest = &rest[len..];
    }
    Tokenized { tokens, trailing: leading }
}

pub fn detokenize(t: &Tokenized) -> String {
    let mut out = String::new();
    for tok in &t.tokens {
        out.push_str(&tok.leading);
        out.push_str(&tok.text);
    }
    out.push_str(&t.trailing);
    out
}

/// Closed token vocabulary. Ids 0, 1, 2 are `[CLS]`, the mask token and `[UNK]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub const CLS_ID: usize = 0;
    pub const MASK_ID: usize = 1;
    pub const UNK_ID: usize = 2;

    /// Builds a vocabulary from every token appearing in `texts`, sorted.
    pub fn build<'a>(mask_token: &str, texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words = BTreeSet::new();
        for text in texts {
            for tok in tokenize(text, &[mask_token, CLS]).tokens {
                words.insert(tok.text);
            }
        }
        let mut tokens = vec![CLS.to_owned(), mask_token.to_owned(), UNK.to_owned()];
        tokens.extend(words.into_iter().filter(|w| w != CLS && w != mask_token && w != UNK));
        Self::from_tokens(tokens)
    }

    /// `tokens` must start with `[CLS]`, the mask token and `[UNK]`.
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    /// Restores the lookup index after deserialisation.
    pub fn reindex(&mut self) {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
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

    pub fn mask_token(&self) -> &str {
        &self.tokens[Self::MASK_ID]
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// Token ids of `text`, prefixed with `[CLS]`. Out-of-vocabulary tokens
    /// map to `[UNK]`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut ids = vec![Self::CLS_ID];
        ids.extend(
            tokenize(text, &[self.mask_token(), CLS])
                .tokens
                .iter()
                .map(|t| self.id(&t.text).unwrap_or(Self::UNK_ID)),
        );
        ids
    }

    /// Token ids of a (possibly multi-token) word, without `[CLS]`.
    pub fn word_ids(&self, word: &str) -> Vec<Option<usize>> {
        tokenize(word, &[self.mask_token()]).tokens.iter().map(|t| self.id(&t.text)).collect()
    }
}
