//! Whitespace/punctuation tokenizer and frequency-thresholded vocabulary.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{CorpusError, Sample};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
/// Sentence separator used when concatenating prior-knowledge sentences.
pub const SEP: usize = 4;

const SPECIALS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<unk>", "<sep>"];

const PUNCT: &[char] = &['.', ',', '!', '?', ';', ':'];

/// Lowercase, split on whitespace, split punctuation off as its own tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars().flat_map(|c| c.to_lowercase()) {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if PUNCT.contains(&ch) {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(ch.to_string());
        } else {
            cur.push(ch);
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Joins tokens with spaces, attaches punctuation, and capitalizes the first
/// word of each sentence.
pub fn detokenize(tokens: &[String]) -> String {
    let mut out = String::new();
    let mut sentence_start = true;
    for tok in tokens {
        let is_punct = tok.len() == 1 && PUNCT.contains(&tok.chars().next().unwrap());
        if is_punct {
            out.push_str(tok);
        } else {
            if !out.is_empty() {
                out.push(' ');
            }
            if sentence_start {
                let mut chars = tok.chars();
                if let Some(first) = chars.next() {
                    out.extend(first.to_uppercase());
                    out.push_str(chars.as_str());
                }
            } else {
                out.push_str(tok);
            }
        }
        sentence_start = matches!(tok.as_str(), "." | "!" | "?");
    }
    out
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
    pub min_freq: usize,
}

impl Vocabulary {
    /// All corpus tokens with frequency >= min_freq, after the fixed
    /// specials. Non-special tokens are ordered alphabetically.
    pub fn build(corpus: &[Sample], min_freq: usize) -> Result<Vocabulary, CorpusError> {
        if corpus.is_empty() {
            return Err(CorpusError::EmptyCorpus);
        }
        let mut freq: HashMap<String, usize> = HashMap::new();
        for sample in corpus {
            for tok in tokenize(&sample.report) {
                *freq.entry(tok).or_insert(0) += 1;
            }
        }
        let mut kept: Vec<String> = freq
            .into_iter()
            .filter(|(_, f)| *f >= min_freq)
            .map(|(t, _)| t)
            .collect();
        kept.sort();
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(kept);
        Ok(Vocabulary::from_tokens(tokens, min_freq))
    }

    pub fn from_tokens(tokens: Vec<String>, min_freq: usize) -> Vocabulary {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary {
            tokens,
            index,
            min_freq,
        }
    }

    /// Rebuilds the lookup table after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        *self.index.get(token).unwrap_or(&UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or("<unk>")
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    pub fn decode_text(&self, ids: &[usize]) -> String {
        detokenize(&self.decode(ids))
    }
}
