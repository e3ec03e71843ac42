//! Incomplete multilingual corpora.
//!
//! A [`MultiCorpus`] holds line-aligned rows over several languages. Any
//! cell may be missing; on disk a missing cell is an empty line.

mod batch;
mod excise;
mod vocab;

use std::fs;
use std::path::{Path, PathBuf};

pub use batch::{batches, frame, Batch, BatchMode, Padded, Task, TaskVocabs};
pub use excise::{excise, Directive, ExcisionPlan};
pub use vocab::{
    build_vocab, Vocabulary, BOS, BOS_TOKEN, EOS, EOS_TOKEN, NULL, NULL_TOKEN, PAD, PAD_TOKEN,
    RESERVED, UNK, UNK_TOKEN,
};

use crate::error::{Error, Result};

/// A pre-tokenized sentence.
pub type Sentence = Vec<String>;

/// One aligned row: one optional sentence per corpus language.
pub type Row = Vec<Option<Sentence>>;

pub fn tokenize(line: &str) -> Option<Sentence> {
    let toks: Sentence = line.split_whitespace().map(str::to_string).collect();
    (!toks.is_empty()).then_some(toks)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiCorpus {
    languages: Vec<String>,
    rows: Vec<Row>,
}

impl MultiCorpus {
    pub fn new(languages: Vec<String>, rows: Vec<Row>) -> Result<Self> {
        for (i, row) in rows.iter().enumerate() {
            if row.len() != languages.len() {
                return Err(Error::Alignment(format!(
                    "row {} has {} cells for {} languages",
                    i + 1,
                    row.len(),
                    languages.len()
                )));
            }
        }
        for (i, l) in languages.iter().enumerate() {
            if languages[..i].contains(l) {
                return Err(Error::Format(format!("language `{l}` listed twice")));
            }
        }
        Ok(MultiCorpus { languages, rows })
    }

    /// Builds a corpus from per-language line lists (empty line = missing).
    pub fn from_lines<S: AsRef<str>>(languages: &[&str], columns: &[Vec<S>]) -> Result<Self> {
        if columns.len() != languages.len() {
            return Err(Error::Alignment(format!(
                "{} columns for {} languages",
                columns.len(),
                languages.len()
            )));
        }
        let n = columns.first().map_or(0, Vec::len);
        if let Some((i, c)) = columns.iter().enumerate().find(|(_, c)| c.len() != n) {
            return Err(Error::Alignment(format!(
                "language `{}` has {} lines, `{}` has {}",
                languages[i],
                c.len(),
                languages[0],
                n
            )));
        }
        let rows = (0..n)
            .map(|r| columns.iter().map(|c| tokenize(c[r].as_ref())).collect())
            .collect();
        MultiCorpus::new(languages.iter().map(|l| l.to_string()).collect(), rows)
    }

    pub fn languages(&self) -> &[String] {
        &self.languages
    }

    pub fn rows(&self) -> &[Row] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column(&self, language: &str) -> Result<usize> {
        self.languages
            .iter()
            .position(|l| l == language)
            .ok_or_else(|| Error::UnknownLanguage(language.to_string()))
    }

    pub fn cell(&self, row: usize, language: &str) -> Result<Option<&Sentence>> {
        let c = self.column(language)?;
        Ok(self.rows[row][c].as_ref())
    }

    /// Number of rows where `language` is present.
    pub fn available(&self, language: &str) -> Result<usize> {
        let c = self.column(language)?;
        Ok(self.rows.iter().filter(|r| r[c].is_some()).count())
    }

    /// Restriction to the listed languages, in that order.
    pub fn select(&self, languages: &[String]) -> Result<MultiCorpus> {
        let cols = languages
            .iter()
            .map(|l| self.column(l))
            .collect::<Result<Vec<_>>>()?;
        let rows = self
            .rows
            .iter()
            .map(|r| cols.iter().map(|&c| r[c].clone()).collect())
            .collect();
        MultiCorpus::new(languages.to_vec(), rows)
    }

    /// Whether every listed language is present in `row`.
    pub fn is_complete(&self, row: usize, languages: &[String]) -> Result<bool> {
        for l in languages {
            if self.cell(row, l)?.is_none() {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Drops every row in which some present sentence is longer than `max_len`.
    pub fn filter_by_length(&self, max_len: usize) -> MultiCorpus {
        let rows = self
            .rows
            .iter()
            .filter(|r| r.iter().flatten().all(|s| s.len() <= max_len))
            .cloned()
            .collect();
        MultiCorpus {
            languages: self.languages.clone(),
            rows,
        }
    }

    /// Writes one file per language, one line per row (empty line = missing).
    pub fn save(&self, paths: &[(String, PathBuf)]) -> Result<()> {
        for (lang, path) in paths {
            let c = self.column(lang)?;
            let mut out = String::new();
            for row in &self.rows {
                if let Some(s) = &row[c] {
                    out.push_str(&s.join(" "));
                }
                out.push('\n');
            }
            fs::write(path, out).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    /// Saves as `<dir>/<split>.<lang>` for every language.
    pub fn save_split(&self, dir: &Path, split: &str) -> Result<()> {
        let paths: Vec<_> = self
            .languages
            .iter()
            .map(|l| (l.clone(), split_path(dir, split, l)))
            .collect();
        self.save(&paths)
    }
}

pub fn split_path(dir: &Path, split: &str, language: &str) -> PathBuf {
    dir.join(format!("{split}.{language}"))
}

/// Reads one line-aligned file per language.
pub fn load_corpus(paths: &[(String, PathBuf)]) -> Result<MultiCorpus> {
    let mut columns = Vec::with_capacity(paths.len());
    for (_, path) in paths {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        columns.push(text.lines().map(str::to_string).collect::<Vec<_>>());
    }
    if let Some(n) = columns.first().map(Vec::len) {
        let counts: Vec<String> = paths
            .iter()
            .zip(&columns)
            .map(|((_, p), c)| format!("{} ({} lines)", p.display(), c.len()))
            .collect();
        if columns.iter().any(|c| c.len() != n) {
            return Err(Error::Alignment(format!(
                "unequal line counts: {}",
                counts.join(", ")
            )));
        }
    }
    let langs: Vec<&str> = paths.iter().map(|(l, _)| l.as_str()).collect();
    MultiCorpus::from_lines(&langs, &columns)
}

/// Loads `<dir>/<split>.<lang>` for each language.
pub fn load_split(dir: &Path, split: &str, languages: &[String]) -> Result<MultiCorpus> {
    let paths: Vec<_> = languages
        .iter()
        .map(|l| (l.clone(), split_path(dir, split, l)))
        .collect();
    load_corpus(&paths)
}
