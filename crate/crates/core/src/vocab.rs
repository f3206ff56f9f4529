use std::collections::HashMap;

use crate::error::{Error, Result};

pub const BOS: &str = "<BOS>";
pub const EOS: &str = "<EOS>";
pub const UNK: &str = "<UNK>";

/// Ordered token list. Ordinary words come first, followed by `<EOS>`,
/// `<BOS>` and, optionally, `<UNK>`.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    bos: usize,
    eos: usize,
    unk: Option<usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from distinct words. Duplicates and special
    /// tokens in `words` are dropped.
    pub fn new<I, S>(words: I, with_unk: bool) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = Vec::new();
        let mut index = HashMap::new();
        for w in words {
            let w = w.into();
            if w == BOS || w == EOS || w == UNK || index.contains_key(&w) {
                continue;
            }
            index.insert(w.clone(), tokens.len());
            tokens.push(w);
        }
        let mut push = |t: &str, tokens: &mut Vec<String>| {
            index.insert(t.to_string(), tokens.len());
            tokens.push(t.to_string());
            tokens.len() - 1
        };
        let eos = push(EOS, &mut tokens);
        let bos = push(BOS, &mut tokens);
        let unk = with_unk.then(|| push(UNK, &mut tokens));
        Vocabulary {
            tokens,
            index,
            bos,
            eos,
            unk,
        }
    }

    /// `n` symbols named `s0 .. s{n-1}`, no UNK.
    pub fn symbols(n: usize) -> Self {
        Vocabulary::new((0..n).map(|i| format!("s{i}")), false)
    }

    /// Restores a vocabulary from its full token list (as written by
    /// [`Vocabulary::tokens`]).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Spec(format!("duplicate token '{t}'")));
            }
        }
        let find = |t: &str| index.get(t).copied();
        let bos = find(BOS).ok_or_else(|| Error::Spec("vocabulary lacks <BOS>".into()))?;
        let eos = find(EOS).ok_or_else(|| Error::Spec("vocabulary lacks <EOS>".into()))?;
        let unk = find(UNK);
        Ok(Vocabulary {
            tokens,
            index,
            bos,
            eos,
            unk,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn bos(&self) -> usize {
        self.bos
    }

    pub fn eos(&self) -> usize {
        self.eos
    }

    pub fn unk(&self) -> Option<usize> {
        self.unk
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    /// Maps space-separated words to indices and appends `<EOS>`.
    /// Unknown words become `<UNK>`, or an error if there is none.
    pub fn encode(&self, line: &str) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for w in line.split_whitespace() {
            match (self.get(w), self.unk) {
                (Some(i), _) => out.push(i),
                (None, Some(u)) => out.push(u),
                (None, None) => return Err(Error::Invalid(format!("word '{w}' not in vocabulary"))),
            }
        }
        out.push(self.eos);
        Ok(out)
    }

    /// Space-joined words, stopping at (and excluding) the first `<EOS>`.
    pub fn decode(&self, tokens: &[usize]) -> String {
        tokens
            .iter()
            .take_while(|&&t| t != self.eos)
            .map(|&t| self.token(t).unwrap_or(UNK))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
