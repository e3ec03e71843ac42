use std::fs;
use std::path::Path;

use super::MultiCorpus;
use crate::error::{Error, Result};

/// Delete `language` in rows `start..=end` (1-based, inclusive).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Directive {
    pub start: usize,
    pub end: usize,
    pub language: String,
    /// Permits deleting the target language of a task.
    pub allow_target: bool,
    /// Line of the plan file this directive came from.
    pub line: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExcisionPlan {
    pub directives: Vec<Directive>,
}

impl ExcisionPlan {
    /// Parses `start_row end_row language [allow-target]` lines. Blank lines
    /// and lines starting with `#` are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut directives = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.trim();
            if body.is_empty() || body.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = body.split_whitespace().collect();
            let bad = |message: String| Error::Plan { line, message };
            if !(3..=4).contains(&fields.len()) {
                return Err(bad(format!(
                    "expected `start_row end_row language`, got `{body}`"
                )));
            }
            let start: usize = fields[0]
                .parse()
                .map_err(|_| bad(format!("bad start row `{}`", fields[0])))?;
            let end: usize = fields[1]
                .parse()
                .map_err(|_| bad(format!("bad end row `{}`", fields[1])))?;
            if start == 0 || end < start {
                return Err(bad(format!("invalid interval {start}-{end}")));
            }
            let allow_target = match fields.get(3) {
                None => false,
                Some(&"allow-target") => true,
                Some(other) => return Err(bad(format!("unknown flag `{other}`"))),
            };
            directives.push(Directive {
                start,
                end,
                language: fields[2].to_string(),
                allow_target,
                line,
            });
        }
        Ok(ExcisionPlan { directives })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Checks bounds and languages against `corpus`; when `target` is given,
    /// directives touching it must carry `allow-target`.
    pub fn validate(&self, corpus: &MultiCorpus, target: Option<&str>) -> Result<()> {
        for d in &self.directives {
            if d.end > corpus.len() {
                return Err(Error::Plan {
                    line: d.line,
                    message: format!(
                        "interval {}-{} exceeds corpus of {} rows",
                        d.start,
                        d.end,
                        corpus.len()
                    ),
                });
            }
            if corpus.column(&d.language).is_err() {
                return Err(Error::Plan {
                    line: d.line,
                    message: format!("unknown language `{}`", d.language),
                });
            }
            if target == Some(d.language.as_str()) && !d.allow_target {
                return Err(Error::Plan {
                    line: d.line,
                    message: format!("deletes target language `{}`", d.language),
                });
            }
        }
        Ok(())
    }
}

/// Marks the planned cells missing. Row count and all other cells are kept.
pub fn excise(corpus: &MultiCorpus, plan: &ExcisionPlan) -> Result<MultiCorpus> {
    plan.validate(corpus, None)?;
    let mut rows = corpus.rows.clone();
    for d in &plan.directives {
        let c = corpus.column(&d.language)?;
        for row in &mut rows[d.start - 1..d.end] {
            row[c] = None;
        }
    }
    MultiCorpus::new(corpus.languages.clone(), rows)
}
