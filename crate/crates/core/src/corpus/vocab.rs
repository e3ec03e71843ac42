use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::MultiCorpus;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const NULL: usize = 4;

pub const PAD_TOKEN: &str = "<PAD>";
pub const BOS_TOKEN: &str = "<BOS>";
pub const EOS_TOKEN: &str = "<EOS>";
pub const UNK_TOKEN: &str = "<UNK>";
pub const NULL_TOKEN: &str = "<NULL>";

pub const RESERVED: [&str; 5] = [PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN, NULL_TOKEN];

/// Token/id bijection. Ids 0..5 are the reserved tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "Vec<String>", try_from = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Vocabulary::from_tokens(tokens)
    }
}

impl Vocabulary {
    /// Reserved tokens followed by `words` in order; duplicates and reserved
    /// tokens within `words` are skipped.
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            ids: HashMap::new(),
        };
        for t in RESERVED {
            v.push(t.to_string());
        }
        for w in words {
            let w = w.into();
            if !v.ids.contains_key(&w) {
                v.push(w);
            }
        }
        v
    }

    /// Rebuilds a vocabulary from its full token list, reserved tokens first.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens.iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err(Error::Format(
                "vocabulary must start with <PAD> <BOS> <EOS> <UNK> <NULL>".into(),
            ));
        }
        let mut v = Vocabulary {
            tokens: Vec::with_capacity(tokens.len()),
            ids: HashMap::with_capacity(tokens.len()),
        };
        for t in tokens {
            if v.ids.contains_key(&t) {
                return Err(Error::Format(format!("duplicate vocabulary token `{t}`")));
            }
            v.push(t);
        }
        Ok(v)
    }

    fn push(&mut self, token: String) {
        self.ids.insert(token.clone(), self.tokens.len());
        self.tokens.push(token);
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(UNK_TOKEN).to_string())
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = self.tokens.join("\n");
        out.push('\n');
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocabulary::from_tokens(text.lines().map(str::to_string).collect())
    }
}

/// Most frequent `cap` tokens of `language`; ties go to the token seen first.
pub fn build_vocab(corpus: &MultiCorpus, language: &str, cap: usize) -> Result<Vocabulary> {
    if cap == 0 {
        return Err(Error::Contract("vocabulary cap must be at least 1".into()));
    }
    let col = corpus.column(language)?;
    let mut counts: HashMap<&str, (usize, usize)> = HashMap::new();
    let mut order = 0;
    for sentence in corpus.rows().iter().filter_map(|r| r[col].as_ref()) {
        for tok in sentence {
            if RESERVED.contains(&tok.as_str()) {
                continue;
            }
            let entry = counts.entry(tok).or_insert_with(|| {
                order += 1;
                (0, order)
            });
            entry.0 += 1;
        }
    }
    let mut ranked: Vec<(&str, usize, usize)> = counts
        .into_iter()
        .map(|(t, (c, first))| (t, c, first))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
    Ok(Vocabulary::new(
        ranked.into_iter().take(cap).map(|(t, _, _)| t),
    ))
}
