//! `nsnmt`: prepare corpora, train one-to-one, multi-encoder and mixture
//! models, translate and score.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use nsnmt::checkpoint::Translator;
use nsnmt::corpus::{
    build_vocab, excise, load_corpus, load_split, split_path, tokenize, ExcisionPlan, MultiCorpus,
    Sentence, Task,
};
use nsnmt::evaluate::{
    build_report, corpus_bleu, paired_bootstrap, significance_marker, SystemKind, SystemOutput,
    SIGNIFICANCE_LEVEL,
};
use nsnmt::pipeline::{train_system, ModelConfig, ModelKind};
use nsnmt::synth::{generate, SynthConfig, SynthData};
use nsnmt::trainer::{history_table, EpochRecord, TrainConfig};

const SPLITS: [&str; 3] = ["train", "valid", "test"];

/// A failure with its process exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<nsnmt::Error> for Failure {
    fn from(e: nsnmt::Error) -> Self {
        Failure {
            code: if e.is_validation() { 2 } else { 1 },
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

#[derive(Parser)]
#[command(
    name = "nsnmt",
    version,
    about = "Multi-source NMT over incomplete multilingual corpora"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Length-filter every split and build vocabularies from `train`.
    Prepare {
        /// Directory holding `<split>.<lang>` files.
        corpus_dir: PathBuf,
        out_dir: PathBuf,
        /// Comma-separated language tags.
        #[arg(long, value_delimiter = ',', required = true)]
        languages: Vec<String>,
        #[arg(long, default_value_t = 40)]
        max_len: usize,
        #[arg(long, default_value_t = 30_000)]
        vocab_cap: usize,
    },
    /// Delete blocks of sentences according to a plan file.
    Excise {
        corpus_dir: PathBuf,
        out_dir: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Train the model described by a TOML run configuration.
    Train {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `model_kind`: one2one, multienc or moe.
        #[arg(long, value_parser = parse_kind)]
        model: Option<ModelKind>,
    },
    /// Translate line-aligned source files; empty lines are missing sources.
    Translate {
        /// Checkpoint or mixture manifest.
        #[arg(long = "checkpoint")]
        checkpoint: PathBuf,
        /// One file per source language, in the model's source order.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, default_value_t = 1)]
        beam: usize,
        #[arg(long, default_value_t = 80)]
        max_len: usize,
    },
    /// Corpus BLEU of a hypothesis file.
    Evaluate {
        hypotheses: PathBuf,
        references: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Paired bootstrap test of system A against system B.
    Significance {
        references: PathBuf,
        system_a: PathBuf,
        system_b: PathBuf,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// BLEU table with gains over the best baseline plus the
    /// complete/incomplete breakdown.
    Report {
        corpus_dir: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, value_delimiter = ',', required = true)]
        sources: Vec<String>,
        #[arg(long)]
        target: String,
        /// `name=path` of a one-to-one system output.
        #[arg(long = "baseline")]
        baselines: Vec<String>,
        /// `name=path` of a multi-source system output.
        #[arg(long = "multi")]
        multi: Vec<String>,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Write the synthetic three-source corpus (`a`, `b`, `c` to `t`).
    Synth {
        out_dir: PathBuf,
        #[arg(long)]
        train_rows: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    data_dir: PathBuf,
    out_dir: PathBuf,
    sources: Vec<String>,
    target: String,
    model_kind: ModelKind,
    /// Drop training rows with a sentence longer than this.
    #[serde(default)]
    max_len: Option<usize>,
    #[serde(default)]
    model: ModelConfig,
    #[serde(default)]
    train: TrainConfig,
}

#[derive(Debug, Serialize)]
struct StageHistory<'a> {
    label: &'a str,
    best_epoch: usize,
    best_valid_log_ppl: f64,
    history: &'a [EpochRecord],
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure {
        code: 1,
        message: format!("cannot read {}: {e}", path.display()),
    })
}

fn write_text(path: &Path, text: &str) -> CmdResult {
    fs::write(path, text).map_err(|e| Failure {
        code: 1,
        message: format!("cannot write {}: {e}", path.display()),
    })
}

fn create_dir(path: &Path) -> CmdResult {
    fs::create_dir_all(path).map_err(|e| Failure {
        code: 1,
        message: format!("cannot create {}: {e}", path.display()),
    })
}

fn read_sentences(path: &Path) -> Result<Vec<Sentence>, Failure> {
    Ok(read_text(path)?
        .lines()
        .map(|l| tokenize(l).unwrap_or_default())
        .collect())
}

fn print_counts(corpus: &MultiCorpus) -> CmdResult {
    for lang in corpus.languages() {
        println!("{lang}\t{}", corpus.available(lang)?);
    }
    Ok(())
}

/// Languages with a `<split>.<lang>` file in `dir`, sorted.
fn split_languages(dir: &Path, split: &str) -> Result<Vec<String>, Failure> {
    let entries = fs::read_dir(dir).map_err(|e| Failure {
        code: 1,
        message: format!("cannot list {}: {e}", dir.display()),
    })?;
    let prefix = format!("{split}.");
    let mut langs: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .filter_map(|e| {
            e.file_name()
                .to_str()?
                .strip_prefix(&prefix)
                .map(str::to_string)
        })
        .filter(|l| !l.is_empty())
        .collect();
    langs.sort();
    if langs.is_empty() {
        return Err(Failure::usage(format!(
            "no `{split}.<lang>` files in {}",
            dir.display()
        )));
    }
    Ok(langs)
}

fn cmd_prepare(
    corpus_dir: &Path,
    out_dir: &Path,
    languages: &[String],
    max_len: usize,
    vocab_cap: usize,
) -> CmdResult {
    if max_len == 0 || vocab_cap == 0 {
        return Err(Failure::usage("--max-len and --vocab-cap must be positive"));
    }
    create_dir(out_dir)?;
    for split in SPLITS {
        if !split_path(corpus_dir, split, &languages[0]).exists() {
            eprintln!("warning: no {split} split, skipped");
            continue;
        }
        let raw = load_split(corpus_dir, split, languages)?;
        let kept = raw.filter_by_length(max_len);
        kept.save_split(out_dir, split)?;
        println!("{split}\t{} of {} rows kept", kept.len(), raw.len());
        if split == "train" {
            print_counts(&kept)?;
            for lang in languages {
                build_vocab(&kept, lang, vocab_cap)?
                    .save(&out_dir.join(format!("vocab.{lang}")))?;
            }
        }
    }
    Ok(())
}

fn cmd_excise(corpus_dir: &Path, out_dir: &Path, plan: &Path, split: &str) -> CmdResult {
    let plan = ExcisionPlan::load(plan)?;
    let languages = split_languages(corpus_dir, split)?;
    let corpus = load_split(corpus_dir, split, &languages)?;
    let excised = excise(&corpus, &plan)?;
    create_dir(out_dir)?;
    // untouched lines are copied verbatim
    for lang in &languages {
        let text = read_text(&split_path(corpus_dir, split, lang))?;
        let mut out = String::with_capacity(text.len());
        for (row, line) in text.split_inclusive('\n').enumerate() {
            if excised.cell(row, lang)?.is_some() {
                out.push_str(line);
            } else if line.ends_with('\n') {
                out.push('\n');
            }
        }
        write_text(&split_path(out_dir, split, lang), &out)?;
    }
    print_counts(&excised)
}

fn cmd_train(config: &Path, seed: Option<u64>, kind: Option<ModelKind>) -> CmdResult {
    let text = read_text(config)?;
    let mut run: RunConfig =
        toml::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", config.display())))?;
    if let Some(s) = seed {
        run.train.seed = s;
        run.model.init_seed = s;
    }
    if let Some(k) = kind {
        run.model_kind = k;
    }
    run.train
        .validate()
        .and_then(|_| run.model.hyper.validate())
        .map_err(|e| Failure::usage(format!("{}: {e}", config.display())))?;
    if run.max_len == Some(0) {
        return Err(Failure::usage("max_len must be positive"));
    }
    if run.sources.contains(&run.target) {
        return Err(Failure::usage(
            "the target language cannot also be a source",
        ));
    }

    let task = Task::new(run.sources.clone(), run.target.clone());
    let mut languages = run.sources.clone();
    languages.push(run.target.clone());
    let mut train_set = load_split(&run.data_dir, "train", &languages)?;
    if let Some(n) = run.max_len {
        train_set = train_set.filter_by_length(n);
    }
    let valid_set = load_split(&run.data_dir, "valid", &languages)?;
    create_dir(&run.out_dir)?;

    let path = run.out_dir.join(match run.model_kind {
        ModelKind::Moe => "model.moe",
        _ => "model.ckpt",
    });
    let ckpt = path.clone();
    let mut hook = move |label: &str, t: &Translator| {
        eprintln!("{label}: checkpoint");
        t.save(&ckpt)
    };
    let system = train_system(
        &train_set,
        &valid_set,
        &task,
        run.model_kind,
        &run.model,
        &run.train,
        &mut hook,
    )?;
    system.translator.save(&path)?;

    let stages: Vec<StageHistory> = system
        .stages
        .iter()
        .map(|s| StageHistory {
            label: &s.label,
            best_epoch: s.outcome.best_epoch,
            best_valid_log_ppl: s.outcome.best_valid_log_ppl,
            history: &s.outcome.history,
        })
        .collect();
    let json = serde_json::to_string_pretty(&stages).map_err(|e| Failure {
        code: 1,
        message: e.to_string(),
    })?;
    write_text(&run.out_dir.join("history.json"), &(json + "\n"))?;
    for s in &system.stages {
        eprintln!("[{}]\n{}", s.label, history_table(&s.outcome.history));
    }
    let last = system.stages.last().expect("at least one stage");
    println!("checkpoint\t{}", path.display());
    println!("best_valid_log_ppl\t{:.6}", last.outcome.best_valid_log_ppl);
    Ok(())
}

fn cmd_translate(
    checkpoint: &Path,
    inputs: &[PathBuf],
    output: &Path,
    beam: usize,
    max_len: usize,
) -> CmdResult {
    if beam == 0 || max_len == 0 {
        return Err(Failure::usage("--beam and --max-len must be positive"));
    }
    let translator = Translator::load(checkpoint)?;
    if inputs.len() != translator.source_languages.len() {
        return Err(Failure::usage(format!(
            "model expects {} input files ({}), got {}",
            translator.source_languages.len(),
            translator.source_languages.join(", "),
            inputs.len()
        )));
    }
    let paths: Vec<(String, PathBuf)> = translator
        .source_languages
        .iter()
        .cloned()
        .zip(inputs.iter().cloned())
        .collect();
    let corpus = load_corpus(&paths)?;
    let (outputs, rejected) = translator.translate_corpus(&corpus, beam, max_len)?;
    let mut text = String::new();
    for s in &outputs {
        text.push_str(&s.join(" "));
        text.push('\n');
    }
    write_text(output, &text)?;
    for r in &rejected {
        eprintln!(
            "warning: row {} has no source sentence, output left empty",
            r + 1
        );
    }
    if !rejected.is_empty() {
        eprintln!(
            "warning: {} of {} rows had no source",
            rejected.len(),
            outputs.len()
        );
    }
    Ok(())
}

fn cmd_evaluate(hyp: &Path, refs: &Path, json: bool) -> CmdResult {
    let report = corpus_bleu(&read_sentences(hyp)?, &read_sentences(refs)?)?;
    if json {
        let text = serde_json::to_string(&report).map_err(|e| Failure {
            code: 1,
            message: e.to_string(),
        })?;
        println!("{text}");
    } else {
        let p: Vec<String> = report
            .precisions
            .iter()
            .map(|p| format!("{:.1}", 100.0 * p))
            .collect();
        println!(
            "BLEU = {:.2}, {} (BP={:.3}, ratio={:.3}, hyp_len={}, ref_len={})",
            report.score,
            p.join("/"),
            report.brevity_penalty,
            report.hyp_len as f64 / report.ref_len.max(1) as f64,
            report.hyp_len,
            report.ref_len
        );
    }
    Ok(())
}

fn cmd_significance(refs: &Path, a: &Path, b: &Path, samples: usize, seed: u64) -> CmdResult {
    let refs = read_sentences(refs)?;
    let (a, b) = (read_sentences(a)?, read_sentences(b)?);
    let bleu_a = corpus_bleu(&a, &refs)?;
    let bleu_b = corpus_bleu(&b, &refs)?;
    let p = paired_bootstrap(&a, &b, &refs, samples, seed)?;
    println!("A\t{:.2}{}", bleu_a.score, significance_marker(p));
    println!("B\t{:.2}", bleu_b.score);
    println!("p\t{p:.4}");
    if p < SIGNIFICANCE_LEVEL {
        println!("A is significantly better than B (p < {SIGNIFICANCE_LEVEL})");
    } else {
        println!("not significant");
    }
    Ok(())
}

fn parse_kind(s: &str) -> Result<ModelKind, String> {
    match s {
        "one2one" => Ok(ModelKind::One2One),
        "multienc" => Ok(ModelKind::MultiEncoder),
        "moe" => Ok(ModelKind::Moe),
        _ => Err(format!("unknown model `{s}` (one2one, multienc, moe)")),
    }
}

fn parse_named(entry: &str) -> Result<(String, PathBuf), Failure> {
    match entry.split_once('=') {
        Some((n, p)) if !n.is_empty() && !p.is_empty() => Ok((n.to_string(), PathBuf::from(p))),
        _ => Err(Failure::usage(format!(
            "expected `name=path`, got `{entry}`"
        ))),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_report(
    corpus_dir: &Path,
    split: &str,
    sources: &[String],
    target: &str,
    baselines: &[String],
    multi: &[String],
    samples: usize,
    seed: u64,
    json: Option<&Path>,
) -> CmdResult {
    if baselines.is_empty() && multi.is_empty() {
        return Err(Failure::usage(
            "give at least one --baseline or --multi system",
        ));
    }
    let mut languages = sources.to_vec();
    languages.push(target.to_string());
    let test = load_split(corpus_dir, split, &languages)?;
    let mut systems = Vec::new();
    for (entries, kind) in [
        (baselines, SystemKind::Baseline),
        (multi, SystemKind::MultiSource),
    ] {
        for entry in entries {
            let (name, path) = parse_named(entry)?;
            systems.push(SystemOutput {
                name,
                kind,
                hypotheses: read_sentences(&path)?,
            });
        }
    }
    let report = build_report(&test, sources, target, &systems, samples, seed)?;
    print!("{}", report.render());
    if let Some(path) = json {
        let text = serde_json::to_string_pretty(&report).map_err(|e| Failure {
            code: 1,
            message: e.to_string(),
        })?;
        write_text(path, &(text + "\n"))?;
    }
    Ok(())
}

fn cmd_synth(out_dir: &Path, train_rows: Option<usize>, seed: Option<u64>) -> CmdResult {
    let defaults = SynthConfig::default();
    let cfg = SynthConfig {
        train_rows: train_rows.unwrap_or(defaults.train_rows),
        seed: seed.unwrap_or(defaults.seed),
        ..defaults
    };
    let data = generate(&cfg).map_err(|e| Failure::usage(e.to_string()))?;
    create_dir(out_dir)?;
    for (split, corpus) in [
        ("train", &data.train),
        ("valid", &data.valid),
        ("test", &data.test),
    ] {
        corpus.save_split(out_dir, split)?;
    }
    println!("languages\t{}", SynthData::languages().join(","));
    print_counts(&data.train)
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Prepare {
            corpus_dir,
            out_dir,
            languages,
            max_len,
            vocab_cap,
        } => cmd_prepare(&corpus_dir, &out_dir, &languages, max_len, vocab_cap),
        Command::Excise {
            corpus_dir,
            out_dir,
            plan,
            split,
        } => cmd_excise(&corpus_dir, &out_dir, &plan, &split),
        Command::Train {
            config,
            seed,
            model,
        } => cmd_train(&config, seed, model),
        Command::Translate {
            checkpoint,
            inputs,
            output,
            beam,
            max_len,
        } => cmd_translate(&checkpoint, &inputs, &output, beam, max_len),
        Command::Evaluate {
            hypotheses,
            references,
            json,
        } => cmd_evaluate(&hypotheses, &references, json),
        Command::Significance {
            references,
            system_a,
            system_b,
            samples,
            seed,
        } => cmd_significance(&references, &system_a, &system_b, samples, seed),
        Command::Report {
            corpus_dir,
            split,
            sources,
            target,
            baselines,
            multi,
            samples,
            seed,
            json,
        } => cmd_report(
            &corpus_dir,
            &split,
            &sources,
            &target,
            &baselines,
            &multi,
            samples,
            seed,
            json.as_deref(),
        ),
        Command::Synth {
            out_dir,
            train_rows,
            seed,
        } => cmd_synth(&out_dir, train_rows, seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
