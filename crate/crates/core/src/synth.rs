//! Synthetic three-source translation task with missing inputs.
//!
//! Source `a` carries the content words, which map one-to-one onto target
//! words. Source `b` carries two key tokens that select the target's
//! two-word prefix. Source `c` is a noisy copy of `a`. The target is the
//! prefix followed by the mapped content, so no single source determines
//! it. Every split loses blocks of cells according to [`synth_plan`].

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Translator;
use crate::corpus::{excise, ExcisionPlan, MultiCorpus, Sentence, Task};
use crate::error::{Error, Result};
use crate::evaluate::{build_report, Report, SystemKind, SystemOutput};
use crate::pipeline::{
    build_task_vocabs, train_moe_gating, train_multiencoder, train_one2one, ModelConfig,
};
use crate::seq2seq::Hyper;
use crate::trainer::{TrainConfig, TrainOutcome};

pub const SOURCES: [&str; 3] = ["a", "b", "c"];
pub const TARGET: &str = "t";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub train_rows: usize,
    pub valid_rows: usize,
    pub test_rows: usize,
    pub content_types: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub keys: usize,
    /// Probability that a `c` token is replaced by noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            train_rows: 2000,
            valid_rows: 200,
            test_rows: 200,
            content_types: 16,
            min_len: 3,
            max_len: 6,
            keys: 4,
            noise: 0.4,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub train: MultiCorpus,
    pub valid: MultiCorpus,
    pub test: MultiCorpus,
}

impl SynthData {
    pub fn languages() -> Vec<String> {
        SOURCES
            .iter()
            .chain([&TARGET])
            .map(|s| s.to_string())
            .collect()
    }

    pub fn task() -> Task {
        Task::new(SOURCES, TARGET)
    }
}

/// Excision plan for `rows` rows: the first 15% lose `a`, the next 15%
/// lose `b` and `c`, the next 15% lose `b` and the next 10% lose `c`.
pub fn synth_plan(rows: usize) -> Result<ExcisionPlan> {
    let at = |f: usize| rows * f / 100;
    let mut text = String::new();
    for (lo, hi, langs) in [(0, 15, "a"), (15, 30, "b c"), (30, 45, "b"), (45, 55, "c")] {
        let (start, end) = (at(lo) + 1, at(hi));
        if start > end {
            continue;
        }
        for lang in langs.split(' ') {
            text.push_str(&format!("{start} {end} {lang}\n"));
        }
    }
    ExcisionPlan::parse(&text)
}

fn generate_split(
    rows: usize,
    cfg: &SynthConfig,
    perm: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<MultiCorpus> {
    let mut cols: Vec<Vec<String>> = (0..4).map(|_| Vec::with_capacity(rows)).collect();
    for _ in 0..rows {
        let len = rng.gen_range(cfg.min_len..=cfg.max_len);
        let words: Vec<usize> = (0..len)
            .map(|_| rng.gen_range(0..cfg.content_types))
            .collect();
        let (k1, k2) = (rng.gen_range(0..cfg.keys), rng.gen_range(0..cfg.keys));
        let a: Vec<String> = words.iter().map(|w| format!("a{w}")).collect();
        let b = [format!("bk{k1}"), format!("bl{k2}")];
        let c: Vec<String> = words
            .iter()
            .map(|w| {
                if rng.gen_bool(cfg.noise) {
                    format!("z{}", rng.gen_range(0..cfg.content_types / 2))
                } else {
                    format!("c{w}")
                }
            })
            .collect();
        let mut t = vec![format!("m{k1}"), format!("n{k2}")];
        t.extend(words.iter().map(|&w| format!("t{}", perm[w])));
        cols[0].push(a.join(" "));
        cols[1].push(b.join(" "));
        cols[2].push(c.join(" "));
        cols[3].push(t.join(" "));
    }
    let langs: Vec<&str> = SOURCES.iter().copied().chain([TARGET]).collect();
    let full = MultiCorpus::from_lines(&langs, &cols)?;
    excise(&full, &synth_plan(rows)?)
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    if cfg.min_len == 0 || cfg.min_len > cfg.max_len || cfg.content_types < 2 || cfg.keys == 0 {
        return Err(Error::Contract(
            "invalid synthetic task configuration".into(),
        ));
    }
    if !(0.0..=1.0).contains(&cfg.noise) {
        return Err(Error::Contract(format!(
            "noise {} is not a probability",
            cfg.noise
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut perm: Vec<usize> = (0..cfg.content_types).collect();
    perm.shuffle(&mut rng);
    Ok(SynthData {
        train: generate_split(cfg.train_rows, cfg, &perm, &mut rng)?,
        valid: generate_split(cfg.valid_rows, cfg, &perm, &mut rng)?,
        test: generate_split(cfg.test_rows, cfg, &perm, &mut rng)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub beam: usize,
    pub max_decode_len: usize,
    pub bootstrap_samples: usize,
    pub bootstrap_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: SynthConfig::default(),
            model: ModelConfig {
                hyper: Hyper {
                    hidden_dim: 24,
                    embed_dim: 16,
                    ..Hyper::default()
                },
                gating_hidden: 32,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                max_epochs: 6,
                batch_size: 16,
                learning_rate: 5e-3,
                patience: 2,
                ..TrainConfig::default()
            },
            beam: 1,
            max_decode_len: 12,
            bootstrap_samples: 1000,
            bootstrap_seed: 11,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SystemRun {
    pub name: String,
    pub kind: SystemKind,
    pub translator: Translator,
    pub outcome: TrainOutcome,
    pub hypotheses: Vec<Sentence>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub data: SynthData,
    pub systems: Vec<SystemRun>,
    pub report: Report,
}

impl ExperimentOutcome {
    pub fn system(&self, name: &str) -> Option<&SystemRun> {
        self.systems.iter().find(|s| s.name == name)
    }
}

/// Trains a one-to-one baseline per source (reused as mixture experts), a
/// multi-encoder model and the mixture's gating network, then scores all
/// of them on the test split.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let data = generate(&cfg.data)?;
    let task = SynthData::task();
    let vocabs = build_task_vocabs(&data.train, &task, cfg.model.hyper.vocab_cap)?;
    let noop = &mut |_: &str, _: &Translator| Ok(());

    let mut runs = Vec::new();
    let mut experts = Vec::new();
    for (i, lang) in task.sources.iter().enumerate() {
        let model = ModelConfig {
            init_seed: cfg.model.init_seed.wrapping_add(i as u64 + 1),
            ..cfg.model.clone()
        };
        let (t, outcome) = train_one2one(
            &data.train,
            &data.valid,
            lang,
            &task.target,
            &vocabs.sources[i],
            &vocabs.target,
            &model,
            &cfg.train,
            noop,
        )?;
        experts.push(t.clone());
        runs.push((format!("one2one:{lang}"), SystemKind::Baseline, t, outcome));
    }
    let (t, outcome) = train_multiencoder(
        &data.train,
        &data.valid,
        &task,
        &vocabs,
        &cfg.model,
        &cfg.train,
        noop,
    )?;
    runs.push(("multienc".into(), SystemKind::MultiSource, t, outcome));
    let (t, outcome) = train_moe_gating(
        &data.train,
        &data.valid,
        &task,
        &experts,
        &cfg.model,
        &cfg.train,
        noop,
    )?;
    runs.push(("moe".into(), SystemKind::MultiSource, t, outcome));

    let mut systems = Vec::with_capacity(runs.len());
    for (name, kind, translator, outcome) in runs {
        let (hypotheses, _) =
            translator.translate_corpus(&data.test, cfg.beam, cfg.max_decode_len)?;
        systems.push(SystemRun {
            name,
            kind,
            translator,
            outcome,
            hypotheses,
        });
    }
    let outputs: Vec<SystemOutput> = systems
        .iter()
        .map(|s| SystemOutput {
            name: s.name.clone(),
            kind: s.kind,
            hypotheses: s.hypotheses.clone(),
        })
        .collect();
    let report = build_report(
        &data.test,
        &task.sources,
        &task.target,
        &outputs,
        cfg.bootstrap_samples,
        cfg.bootstrap_seed,
    )?;
    Ok(ExperimentOutcome {
        data,
        systems,
        report,
    })
}
