use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{Vocabulary, BOS, EOS, NULL, PAD};
use super::{MultiCorpus, Sentence};
use crate::error::{Error, Result};

/// Source languages and one target language.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub sources: Vec<String>,
    pub target: String,
}

impl Task {
    pub fn new<S: Into<String>>(
        sources: impl IntoIterator<Item = S>,
        target: impl Into<String>,
    ) -> Self {
        Task {
            sources: sources.into_iter().map(Into::into).collect(),
            target: target.into(),
        }
    }

    pub fn describe(&self) -> String {
        format!("{{{}}}-to-{}", self.sources.join(","), self.target)
    }
}

/// Vocabularies aligned with a [`Task`]: one per source plus the target's.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskVocabs {
    pub sources: Vec<Vocabulary>,
    pub target: Vocabulary,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BatchMode {
    /// One-to-one training data for one source: rows missing it are skipped.
    Expert(String),
    /// Every row with at least one source; missing sources become `<NULL>`.
    MultiSource,
}

/// Padded id matrix with its mask (`true` = real token).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Padded {
    pub ids: Vec<Vec<usize>>,
    pub mask: Vec<Vec<bool>>,
}

impl Padded {
    fn from_sequences(seqs: Vec<Vec<usize>>) -> Self {
        let width = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len());
        let mut mask = Vec::with_capacity(seqs.len());
        for s in seqs {
            let n = s.len();
            let mut row = s;
            row.resize(width, PAD);
            ids.push(row);
            mask.push((0..width).map(|i| i < n).collect());
        }
        Padded { ids, mask }
    }

    /// The unpadded sequence of batch entry `i`.
    pub fn sequence(&self, i: usize) -> Vec<usize> {
        self.ids[i]
            .iter()
            .zip(&self.mask[i])
            .filter(|(_, m)| **m)
            .map(|(id, _)| *id)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    /// Corpus row index of each batch entry.
    pub rows: Vec<usize>,
    /// One padded matrix per task source (only the expert's source in expert mode).
    pub sources: Vec<Padded>,
    pub target: Padded,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// `[BOS] tokens [EOS]`, or `[BOS] <NULL> [EOS]` for a missing sentence.
pub fn frame(sentence: Option<&Sentence>, vocab: &Vocabulary) -> Vec<usize> {
    let mut ids = vec![BOS];
    match sentence {
        Some(s) => ids.extend(vocab.encode(s)),
        None => ids.push(NULL),
    }
    ids.push(EOS);
    ids
}

/// Numericalized, padded batches for `task`. Rows missing the target are
/// skipped. With a seed the row order is shuffled deterministically,
/// otherwise corpus order is kept.
pub fn batches(
    corpus: &MultiCorpus,
    task: &Task,
    vocabs: &TaskVocabs,
    batch_size: usize,
    mode: &BatchMode,
    seed: Option<u64>,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Contract("batch size must be at least 1".into()));
    }
    if vocabs.sources.len() != task.sources.len() {
        return Err(Error::Contract(format!(
            "{} source vocabularies for {} sources",
            vocabs.sources.len(),
            task.sources.len()
        )));
    }
    let tcol = corpus.column(&task.target)?;
    let scols = task
        .sources
        .iter()
        .map(|l| corpus.column(l))
        .collect::<Result<Vec<_>>>()?;
    let used: Vec<usize> = match mode {
        BatchMode::Expert(lang) => {
            let k = task
                .sources
                .iter()
                .position(|l| l == lang)
                .ok_or_else(|| Error::UnknownLanguage(lang.clone()))?;
            vec![k]
        }
        BatchMode::MultiSource => (0..scols.len()).collect(),
    };

    let mut rows: Vec<usize> = (0..corpus.len())
        .filter(|&r| {
            let row = &corpus.rows()[r];
            row[tcol].is_some() && used.iter().any(|&k| row[scols[k]].is_some())
        })
        .collect();
    if rows.is_empty() {
        return Err(Error::EmptyTask(task.describe()));
    }
    if let Some(seed) = seed {
        rows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }

    Ok(rows
        .chunks(batch_size)
        .map(|chunk| {
            let sources = used
                .iter()
                .map(|&k| {
                    Padded::from_sequences(
                        chunk
                            .iter()
                            .map(|&r| {
                                frame(corpus.rows()[r][scols[k]].as_ref(), &vocabs.sources[k])
                            })
                            .collect(),
                    )
                })
                .collect();
            let target = Padded::from_sequences(
                chunk
                    .iter()
                    .map(|&r| frame(corpus.rows()[r][tcol].as_ref(), &vocabs.target))
                    .collect(),
            );
            Batch {
                rows: chunk.to_vec(),
                sources,
                target,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::super::vocab::{build_vocab, UNK};
    use super::super::{excise, ExcisionPlan};
    use super::*;

    fn desk() -> (MultiCorpus, Task, TaskVocabs) {
        let n = 800;
        let col = |l: &str| {
            (0..n)
                .map(|i| format!("{l}{} {l}x", i % 7))
                .collect::<Vec<_>>()
        };
        let c = MultiCorpus::from_lines(
            &["es", "fr", "ar", "en"],
            &[col("es"), col("fr"), col("ar"), col("en")],
        )
        .unwrap();
        let plan = ExcisionPlan::parse("1 200 es\n201 400 ar\n401 600 fr").unwrap();
        let c = excise(&c, &plan).unwrap();
        let task = Task::new(["es", "fr", "ar"], "en");
        let vocabs = TaskVocabs {
            sources: task
                .sources
                .iter()
                .map(|l| build_vocab(&c, l, 100).unwrap())
                .collect(),
            target: build_vocab(&c, "en", 100).unwrap(),
        };
        (c, task, vocabs)
    }

    fn count(bs: &[Batch]) -> usize {
        bs.iter().map(Batch::len).sum()
    }

    #[test]
    fn expert_mode_uses_600_rows_per_language() {
        let (c, task, vocabs) = desk();
        for lang in ["es", "fr", "ar"] {
            let bs = batches(
                &c,
                &task,
                &vocabs,
                64,
                &BatchMode::Expert(lang.into()),
                Some(1),
            )
            .unwrap();
            assert_eq!(count(&bs), 600, "{lang}");
            for b in &bs {
                assert_eq!(b.sources.len(), 1);
                assert!(b.sources[0].ids.iter().flatten().all(|&id| id != NULL));
            }
        }
    }

    #[test]
    fn multisource_mode_uses_every_row_and_nulls_exactly_missing_cells() {
        let (c, task, vocabs) = desk();
        let bs = batches(&c, &task, &vocabs, 50, &BatchMode::MultiSource, None).unwrap();
        assert_eq!(count(&bs), 800);
        for b in &bs {
            for (i, &r) in b.rows.iter().enumerate() {
                for (k, lang) in task.sources.iter().enumerate() {
                    let seq = b.sources[k].sequence(i);
                    let missing = c.cell(r, lang).unwrap().is_none();
                    assert_eq!(seq == vec![BOS, NULL, EOS], missing);
                    assert_eq!(seq.contains(&NULL), missing);
                }
            }
        }
    }

    #[test]
    fn padding_mask_and_framing() {
        let c =
            MultiCorpus::from_lines(&["s", "t"], &[vec!["a b c", "a"], vec!["x", "y zz"]]).unwrap();
        let task = Task::new(["s"], "t");
        let vocabs = TaskVocabs {
            sources: vec![Vocabulary::new(["a", "b", "c"])],
            target: Vocabulary::new(["x", "y"]),
        };
        let bs = batches(&c, &task, &vocabs, 8, &BatchMode::MultiSource, None).unwrap();
        assert_eq!(bs.len(), 1);
        let src = &bs[0].sources[0];
        assert_eq!(src.ids[1], vec![BOS, 5, EOS, PAD, PAD]);
        assert_eq!(src.mask[1], vec![true, true, true, false, false]);
        assert_eq!(bs[0].target.sequence(1), vec![BOS, 6, UNK, EOS]);
    }

    #[test]
    fn rows_without_target_are_skipped_and_empty_task_errors() {
        let c = MultiCorpus::from_lines(&["s", "t"], &[vec!["a", "b"], vec!["", "x"]]).unwrap();
        let task = Task::new(["s"], "t");
        let vocabs = TaskVocabs {
            sources: vec![Vocabulary::new(["a", "b"])],
            target: Vocabulary::new(["x"]),
        };
        let bs = batches(&c, &task, &vocabs, 8, &BatchMode::MultiSource, None).unwrap();
        assert_eq!(bs[0].rows, vec![1]);
        let c = MultiCorpus::from_lines(&["s", "t"], &[vec!["", "b"], vec!["x", ""]]).unwrap();
        assert!(matches!(
            batches(&c, &task, &vocabs, 8, &BatchMode::MultiSource, None),
            Err(Error::EmptyTask(_))
        ));
    }

    #[test]
    fn shuffling_is_seeded() {
        let (c, task, vocabs) = desk();
        let order = |seed| {
            batches(&c, &task, &vocabs, 800, &BatchMode::MultiSource, Some(seed)).unwrap()[0]
                .rows
                .clone()
        };
        assert_eq!(order(3), order(3));
        assert_ne!(order(3), order(4));
    }
}
