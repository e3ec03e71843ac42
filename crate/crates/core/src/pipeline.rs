//! End-to-end training of one-to-one, multi-encoder and mixture systems
//! from line-aligned corpora.

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Model, Translator};
use crate::corpus::{batches, build_vocab, BatchMode, MultiCorpus, Task, TaskVocabs, Vocabulary};
use crate::error::{Error, Result};
use crate::moe::{train_gating, GateInput, MoeEnsemble, DEFAULT_GATING_HIDDEN};
use crate::multiencoder::{MultiEncoderModel, MultiExample};
use crate::seq2seq::{Hyper, PairExample, Seq2Seq};
use crate::trainer::{train, EpochRecord, TrainConfig, TrainOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "one2one")]
    One2One,
    #[serde(rename = "multienc")]
    MultiEncoder,
    #[serde(rename = "moe")]
    Moe,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::One2One => "one2one",
            ModelKind::MultiEncoder => "multienc",
            ModelKind::Moe => "moe",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hyper: Hyper,
    pub gating_hidden: usize,
    pub gate_input: GateInput,
    /// Seed of parameter initialization.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hyper: Hyper::default(),
            gating_hidden: DEFAULT_GATING_HIDDEN,
            gate_input: GateInput::default(),
            init_seed: 1,
        }
    }
}

/// One trained stage: `model`, `expert:<lang>` or `gating`.
#[derive(Debug, Clone)]
pub struct Stage {
    pub label: String,
    pub outcome: TrainOutcome,
}

#[derive(Debug, Clone)]
pub struct TrainedSystem {
    pub translator: Translator,
    pub stages: Vec<Stage>,
}

/// Per-language vocabularies built from the training split.
pub fn build_task_vocabs(train: &MultiCorpus, task: &Task, cap: usize) -> Result<TaskVocabs> {
    Ok(TaskVocabs {
        sources: task
            .sources
            .iter()
            .map(|l| build_vocab(train, l, cap))
            .collect::<Result<_>>()?,
        target: build_vocab(train, &task.target, cap)?,
    })
}

/// Framed examples for `task` under `mode`, in corpus order.
pub fn multi_examples(
    corpus: &MultiCorpus,
    task: &Task,
    vocabs: &TaskVocabs,
    mode: &BatchMode,
) -> Result<Vec<MultiExample>> {
    let mut out = Vec::new();
    for b in batches(corpus, task, vocabs, corpus.len().max(1), mode, None)? {
        for i in 0..b.len() {
            out.push(MultiExample {
                sources: b.sources.iter().map(|p| p.sequence(i)).collect(),
                target: b.target.sequence(i),
            });
        }
    }
    Ok(out)
}

fn pair_examples(
    corpus: &MultiCorpus,
    source: &str,
    target: &str,
    vocabs: &TaskVocabs,
) -> Result<Vec<PairExample>> {
    let task = Task::new([source], target);
    Ok(
        multi_examples(corpus, &task, vocabs, &BatchMode::Expert(source.into()))?
            .into_iter()
            .map(|e| PairExample {
                source: e.sources.into_iter().next().expect("one source"),
                target: e.target,
            })
            .collect(),
    )
}

/// Callback receiving the stage label and the translator to persist
/// whenever validation log-perplexity improves.
pub type CheckpointHook<'a> = dyn FnMut(&str, &Translator) -> Result<()> + 'a;

pub fn train_one2one(
    train_set: &MultiCorpus,
    valid_set: &MultiCorpus,
    source: &str,
    target: &str,
    source_vocab: &Vocabulary,
    target_vocab: &Vocabulary,
    model: &ModelConfig,
    config: &TrainConfig,
    hook: &mut CheckpointHook,
) -> Result<(Translator, TrainOutcome)> {
    let vocabs = TaskVocabs {
        sources: vec![source_vocab.clone()],
        target: target_vocab.clone(),
    };
    let tr = pair_examples(train_set, source, target, &vocabs)?;
    let va = pair_examples(valid_set, source, target, &vocabs)?;
    let mut m = Seq2Seq::new(
        model.hyper.clone(),
        source_vocab.len(),
        target_vocab.len(),
        model.init_seed,
    )?;
    let wrap = |m: &Seq2Seq| Translator {
        source_languages: vec![source.to_string()],
        target_language: target.to_string(),
        source_vocabs: vec![source_vocab.clone()],
        target_vocab: target_vocab.clone(),
        model: Model::One2One(m.clone()),
    };
    let label = format!("expert:{source}");
    let outcome = train(&mut m, &tr, &va, config, |m, _: &EpochRecord| {
        hook(&label, &wrap(m))
    })?;
    Ok((wrap(&m), outcome))
}

pub fn train_multiencoder(
    train_set: &MultiCorpus,
    valid_set: &MultiCorpus,
    task: &Task,
    vocabs: &TaskVocabs,
    model: &ModelConfig,
    config: &TrainConfig,
    hook: &mut CheckpointHook,
) -> Result<(Translator, TrainOutcome)> {
    let tr = multi_examples(train_set, task, vocabs, &BatchMode::MultiSource)?;
    let va = multi_examples(valid_set, task, vocabs, &BatchMode::MultiSource)?;
    let sizes: Vec<usize> = vocabs.sources.iter().map(Vocabulary::len).collect();
    let mut m = MultiEncoderModel::new(
        model.hyper.clone(),
        &sizes,
        vocabs.target.len(),
        model.init_seed,
    )?;
    let wrap = |m: &MultiEncoderModel| Translator {
        source_languages: task.sources.clone(),
        target_language: task.target.clone(),
        source_vocabs: vocabs.sources.clone(),
        target_vocab: vocabs.target.clone(),
        model: Model::MultiEncoder(m.clone()),
    };
    let outcome = train(&mut m, &tr, &va, config, |m, _| hook("model", &wrap(m)))?;
    Ok((wrap(&m), outcome))
}

/// Trains the gating network of a mixture over already trained experts,
/// given in `task.sources` order.
pub fn train_moe_gating(
    train_set: &MultiCorpus,
    valid_set: &MultiCorpus,
    task: &Task,
    experts: &[Translator],
    model: &ModelConfig,
    config: &TrainConfig,
    hook: &mut CheckpointHook,
) -> Result<(Translator, TrainOutcome)> {
    if experts.len() != task.sources.len() {
        return Err(Error::Contract(format!(
            "{} experts for {} sources",
            experts.len(),
            task.sources.len()
        )));
    }
    let mut models = Vec::with_capacity(experts.len());
    for (e, lang) in experts.iter().zip(&task.sources) {
        match &e.model {
            Model::One2One(m) if e.source_languages == [lang.clone()] => models.push(m.clone()),
            _ => {
                return Err(Error::Contract(format!(
                    "expert for `{lang}` must be a one-to-one model from `{lang}`"
                )))
            }
        }
    }
    let vocabs = TaskVocabs {
        sources: experts.iter().map(|e| e.source_vocabs[0].clone()).collect(),
        target: experts[0].target_vocab.clone(),
    };
    let tr = multi_examples(train_set, task, &vocabs, &BatchMode::MultiSource)?;
    let va = multi_examples(valid_set, task, &vocabs, &BatchMode::MultiSource)?;
    let mut ens = MoeEnsemble::new(
        models,
        model.gating_hidden,
        model.gate_input,
        model.init_seed,
    )?;
    let wrap = |e: &MoeEnsemble| Translator {
        source_languages: task.sources.clone(),
        target_language: task.target.clone(),
        source_vocabs: vocabs.sources.clone(),
        target_vocab: vocabs.target.clone(),
        model: Model::Moe(e.clone()),
    };
    let outcome = train_gating(&mut ens, &tr, &va, config, |e, _| hook("gating", &wrap(e)))?;
    Ok((wrap(&ens), outcome))
}

/// Builds vocabularies and trains a system of the requested kind. A
/// mixture first trains one expert per source, each on the rows where its
/// source is present, then the gating network on every row.
pub fn train_system(
    train_set: &MultiCorpus,
    valid_set: &MultiCorpus,
    task: &Task,
    kind: ModelKind,
    model: &ModelConfig,
    config: &TrainConfig,
    hook: &mut CheckpointHook,
) -> Result<TrainedSystem> {
    if kind != ModelKind::One2One && task.sources.len() < 2 {
        return Err(Error::Format(format!(
            "model `{}` needs at least two source languages",
            kind.name()
        )));
    }
    if kind == ModelKind::One2One && task.sources.len() != 1 {
        return Err(Error::Format(
            "model `one2one` takes exactly one source language".into(),
        ));
    }
    let vocabs = build_task_vocabs(train_set, task, model.hyper.vocab_cap)?;
    match kind {
        ModelKind::One2One => {
            let (t, outcome) = train_one2one(
                train_set,
                valid_set,
                &task.sources[0],
                &task.target,
                &vocabs.sources[0],
                &vocabs.target,
                model,
                config,
                hook,
            )?;
            Ok(TrainedSystem {
                translator: t,
                stages: vec![Stage {
                    label: "model".into(),
                    outcome,
                }],
            })
        }
        ModelKind::MultiEncoder => {
            let (t, outcome) =
                train_multiencoder(train_set, valid_set, task, &vocabs, model, config, hook)?;
            Ok(TrainedSystem {
                translator: t,
                stages: vec![Stage {
                    label: "model".into(),
                    outcome,
                }],
            })
        }
        ModelKind::Moe => {
            let mut stages = Vec::new();
            let mut experts = Vec::new();
            for (i, lang) in task.sources.iter().enumerate() {
                let expert_model = ModelConfig {
                    init_seed: model.init_seed.wrapping_add(i as u64 + 1),
                    ..model.clone()
                };
                let (t, outcome) = train_one2one(
                    train_set,
                    valid_set,
                    lang,
                    &task.target,
                    &vocabs.sources[i],
                    &vocabs.target,
                    &expert_model,
                    config,
                    &mut |_, _| Ok(()),
                )?;
                stages.push(Stage {
                    label: format!("expert:{lang}"),
                    outcome,
                });
                experts.push(t);
            }
            let (t, outcome) =
                train_moe_gating(train_set, valid_set, task, &experts, model, config, hook)?;
            stages.push(Stage {
                label: "gating".into(),
                outcome,
            });
            Ok(TrainedSystem {
                translator: t,
                stages,
            })
        }
    }
}
