//! Deterministic whitespace+punctuation tokenizer and vocabulary.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const SEP_ID: usize = 3;

pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";
pub const CLS_TOKEN: &str = "[CLS]";
pub const SEP_TOKEN: &str = "[SEP]";

/// Fixed token <-> id mapping. Ids 0..4 are the special tokens.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Build from unique non-special tokens, in the given order.
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for s in [PAD_TOKEN, UNK_TOKEN, CLS_TOKEN, SEP_TOKEN] {
            v.push(s.to_string());
        }
        for t in tokens {
            if !v.index.contains_key(&t) {
                v.push(t);
            }
        }
        v
    }

    /// Frequency-ranked vocabulary capped at `max_size` total entries
    /// (including the 4 specials). Ties break lexicographically.
    pub fn from_counts(counts: &HashMap<String, usize>, max_size: usize) -> Self {
        let mut ranked: Vec<(&String, &usize)> = counts.iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
        let keep = max_size.saturating_sub(4);
        Self::from_tokens(ranked.into_iter().take(keep).map(|(t, _)| t.clone()))
    }

    fn push(&mut self, t: String) {
        self.index.insert(t.clone(), self.tokens.len());
        self.tokens.push(t);
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of a token, falling back to `[UNK]`.
    pub fn id_of(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn ids(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id_of(t)).collect()
    }

    pub fn strings(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(f), &self.tokens)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let tokens: Vec<String> = serde_json::from_reader(std::io::BufReader::new(f))?;
        if tokens.len() < 4 || tokens[PAD_ID] != PAD_TOKEN || tokens[CLS_ID] != CLS_TOKEN {
            return Err(Error::Format(format!(
                "{} is not a vocabulary file",
                path.display()
            )));
        }
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            index.insert(t.clone(), i);
        }
        Ok(Self { tokens, index })
    }
}

/// Lowercased tokens split on whitespace, with punctuation characters as
/// single-character tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    tokenize_with_offsets(text)
        .into_iter()
        .map(|(t, _, _)| t)
        .collect()
}

/// Like [`tokenize`] but each token carries its half-open char-offset
/// range in the original text.
pub fn tokenize_with_offsets(text: &str) -> Vec<(String, usize, usize)> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut word_start: Option<usize> = None;
    let flush = |out: &mut Vec<(String, usize, usize)>, chars: &[char], start: usize, end: usize| {
        if end > start {
            let tok: String = chars[start..end].iter().collect::<String>().to_lowercase();
            out.push((tok, start, end));
        }
    };
    for (i, &c) in chars.iter().enumerate() {
        if c.is_whitespace() {
            if let Some(s) = word_start.take() {
                flush(&mut out, &chars, s, i);
            }
        } else if c.is_alphanumeric() {
            if word_start.is_none() {
                word_start = Some(i);
            }
        } else {
            if let Some(s) = word_start.take() {
                flush(&mut out, &chars, s, i);
            }
            out.push((c.to_lowercase().collect(), i, i + 1));
        }
    }
    if let Some(s) = word_start {
        flush(&mut out, &chars, s, chars.len());
    }
    out
}

/// Inverse of [`tokenize`] on already-tokenized text (space joined).
pub fn detokenize(tokens: &[String]) -> String {
    tokens.join(" ")
}
