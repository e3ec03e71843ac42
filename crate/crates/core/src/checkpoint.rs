//! Versioned checkpoint files and a uniform translator over all model kinds.
//!
//! A checkpoint is the magic line `NSNMT1` followed by one JSON document
//! holding the model kind, language tags, hyperparameters, vocabularies and
//! every named parameter tensor. A mixture of experts is stored as a JSON
//! manifest naming one checkpoint per expert plus a gating checkpoint.

use std::fs;
use std::path::{Path, PathBuf};
use std::thread;

use serde::{Deserialize, Serialize};

use crate::autodiff::{NamedTensor, Params};
use crate::corpus::{MultiCorpus, Sentence, Vocabulary};
use crate::error::{Error, Result};
use crate::moe::{GateInput, MoeEnsemble};
use crate::multiencoder::{prepare_inputs, MultiEncoderModel};
use crate::seq2seq::{Hyper, Seq2Seq};

pub const MAGIC: &str = "NSNMT1";
pub const MANIFEST_FORMAT: &str = "NSNMT1-moe";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    #[serde(rename = "one2one")]
    One2One,
    #[serde(rename = "multienc")]
    MultiEncoder,
    Gating,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatingSpec {
    pub hidden: usize,
    pub gate_input: GateInput,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub source_languages: Vec<String>,
    pub target_language: String,
    /// Unused for gating checkpoints, whose experts carry their own.
    pub hyper: Hyper,
    pub source_vocabs: Vec<Vocabulary>,
    pub target_vocab: Vocabulary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gating: Option<GatingSpec>,
    pub params: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn render(&self) -> Result<String> {
        let body = serde_json::to_string(self).map_err(|e| Error::Format(e.to_string()))?;
        Ok(format!("{MAGIC}\n{body}\n"))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let (magic, body) = text.split_once('\n').unwrap_or((text, ""));
        if magic.trim_end() != MAGIC {
            return Err(Error::Format(format!("not a {MAGIC} checkpoint")));
        }
        serde_json::from_str(body).map_err(|e| Error::Format(format!("bad checkpoint body: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::parse(&text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertEntry {
    pub language: String,
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoeManifest {
    pub format: String,
    pub experts: Vec<ExpertEntry>,
    pub gating: PathBuf,
}

impl MoeManifest {
    pub fn new(experts: Vec<ExpertEntry>, gating: PathBuf) -> Self {
        MoeManifest {
            format: MANIFEST_FORMAT.into(),
            experts,
            gating,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: MoeManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("bad manifest {}: {e}", path.display())))?;
        if m.format != MANIFEST_FORMAT {
            return Err(Error::Format(format!(
                "unknown manifest format `{}`",
                m.format
            )));
        }
        Ok(m)
    }
}

#[derive(Debug, Clone)]
pub enum Model {
    One2One(Seq2Seq),
    MultiEncoder(MultiEncoderModel),
    Moe(MoeEnsemble),
}

/// A trained model with its languages and vocabularies.
#[derive(Debug, Clone)]
pub struct Translator {
    pub source_languages: Vec<String>,
    pub target_language: String,
    pub source_vocabs: Vec<Vocabulary>,
    pub target_vocab: Vocabulary,
    pub model: Model,
}

fn check_vocab_sizes(ck: &Checkpoint) -> Result<()> {
    if ck.source_vocabs.len() != ck.source_languages.len() {
        return Err(Error::Format(format!(
            "{} source vocabularies for {} languages",
            ck.source_vocabs.len(),
            ck.source_languages.len()
        )));
    }
    Ok(())
}

fn load_params(into: &mut Params, named: &[NamedTensor]) -> Result<()> {
    into.load_named(named)
        .map_err(|e| Error::Format(format!("checkpoint parameters do not match the model: {e}")))
}

impl Translator {
    pub fn kind(&self) -> &'static str {
        match self.model {
            Model::One2One(_) => "one2one",
            Model::MultiEncoder(_) => "multienc",
            Model::Moe(_) => "moe",
        }
    }

    /// Rebuilds a one-to-one or multi-encoder model from its checkpoint.
    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        check_vocab_sizes(&ck)?;
        let src_sizes: Vec<usize> = ck.source_vocabs.iter().map(Vocabulary::len).collect();
        let model = match ck.kind {
            CheckpointKind::One2One => {
                if src_sizes.len() != 1 {
                    return Err(Error::Format(
                        "one-to-one checkpoint must have one source".into(),
                    ));
                }
                let mut m = Seq2Seq::new(ck.hyper.clone(), src_sizes[0], ck.target_vocab.len(), 0)?;
                load_params(&mut m.params, &ck.params)?;
                Model::One2One(m)
            }
            CheckpointKind::MultiEncoder => {
                let mut m =
                    MultiEncoderModel::new(ck.hyper.clone(), &src_sizes, ck.target_vocab.len(), 0)?;
                load_params(&mut m.params, &ck.params)?;
                Model::MultiEncoder(m)
            }
            CheckpointKind::Gating => {
                return Err(Error::Format(
                    "a gating checkpoint must be loaded through its manifest".into(),
                ))
            }
        };
        Ok(Translator {
            source_languages: ck.source_languages,
            target_language: ck.target_language,
            source_vocabs: ck.source_vocabs,
            target_vocab: ck.target_vocab,
            model,
        })
    }

    /// Assembles a mixture from expert translators and a gating checkpoint.
    pub fn from_moe_parts(experts: Vec<Translator>, gating: Checkpoint) -> Result<Self> {
        let spec = gating
            .gating
            .clone()
            .ok_or_else(|| Error::Format("gating checkpoint lacks its gating section".into()))?;
        let mut models = Vec::with_capacity(experts.len());
        let mut languages = Vec::with_capacity(experts.len());
        let mut vocabs = Vec::with_capacity(experts.len());
        for e in experts {
            if e.target_vocab != gating.target_vocab {
                return Err(Error::Format(format!(
                    "expert for `{}` does not share the target vocabulary",
                    e.source_languages.join(",")
                )));
            }
            match e.model {
                Model::One2One(m) => models.push(m),
                _ => {
                    return Err(Error::Format(
                        "mixture experts must be one-to-one models".into(),
                    ))
                }
            }
            languages.extend(e.source_languages);
            vocabs.extend(e.source_vocabs);
        }
        if languages != gating.source_languages {
            return Err(Error::Format(format!(
                "manifest experts {languages:?} do not match gating sources {:?}",
                gating.source_languages
            )));
        }
        let mut ens = MoeEnsemble::new(models, spec.hidden, spec.gate_input, 0)?;
        load_params(&mut ens.params, &gating.params)?;
        Ok(Translator {
            source_languages: languages,
            target_language: gating.target_language,
            source_vocabs: vocabs,
            target_vocab: gating.target_vocab,
            model: Model::Moe(ens),
        })
    }

    /// Loads a checkpoint, or a mixture manifest (recognized by content).
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if text.starts_with(MAGIC) {
            return Translator::from_checkpoint(Checkpoint::parse(&text)?);
        }
        let manifest = MoeManifest::load(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &Path| {
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        let mut experts = Vec::with_capacity(manifest.experts.len());
        for e in &manifest.experts {
            let t = Translator::from_checkpoint(Checkpoint::load(&resolve(&e.checkpoint))?)?;
            if t.source_languages != [e.language.clone()] {
                return Err(Error::Format(format!(
                    "manifest says `{}` but the checkpoint translates from {:?}",
                    e.language, t.source_languages
                )));
            }
            experts.push(t);
        }
        Translator::from_moe_parts(experts, Checkpoint::load(&resolve(&manifest.gating))?)
    }

    /// Checkpoint of a one-to-one or multi-encoder model, or the gating
    /// part of a mixture.
    pub fn checkpoint(&self) -> Checkpoint {
        let (kind, hyper, params, gating) = match &self.model {
            Model::One2One(m) => (CheckpointKind::One2One, m.hyper.clone(), &m.params, None),
            Model::MultiEncoder(m) => (
                CheckpointKind::MultiEncoder,
                m.hyper.clone(),
                &m.params,
                None,
            ),
            Model::Moe(e) => (
                CheckpointKind::Gating,
                e.experts[0].hyper.clone(),
                &e.params,
                Some(GatingSpec {
                    hidden: e.gating.hidden,
                    gate_input: e.gate_input,
                }),
            ),
        };
        Checkpoint {
            kind,
            source_languages: self.source_languages.clone(),
            target_language: self.target_language.clone(),
            hyper,
            source_vocabs: self.source_vocabs.clone(),
            target_vocab: self.target_vocab.clone(),
            gating,
            params: params.to_named(),
        }
    }

    /// One-to-one translator for each expert of a mixture.
    pub fn experts(&self) -> Vec<Translator> {
        match &self.model {
            Model::Moe(e) => e
                .experts
                .iter()
                .zip(&self.source_languages)
                .zip(&self.source_vocabs)
                .map(|((m, l), v)| Translator {
                    source_languages: vec![l.clone()],
                    target_language: self.target_language.clone(),
                    source_vocabs: vec![v.clone()],
                    target_vocab: self.target_vocab.clone(),
                    model: Model::One2One(m.clone()),
                })
                .collect(),
            _ => Vec::new(),
        }
    }

    /// Writes a mixture as `<stem>.expert.<lang>.ckpt` files, a gating
    /// checkpoint and the manifest at `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        if !matches!(self.model, Model::Moe(_)) {
            return self.checkpoint().save(path);
        }
        let dir = path.parent().unwrap_or(Path::new("."));
        let stem = path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "moe".into());
        let mut entries = Vec::new();
        for e in self.experts() {
            let name = format!("{stem}.expert.{}.ckpt", e.source_languages[0]);
            e.checkpoint().save(&dir.join(&name))?;
            entries.push(ExpertEntry {
                language: e.source_languages[0].clone(),
                checkpoint: PathBuf::from(name),
            });
        }
        let gating = format!("{stem}.gating.ckpt");
        self.checkpoint().save(&dir.join(&gating))?;
        MoeManifest::new(entries, PathBuf::from(gating)).save(path)
    }

    /// Translates one row given its cells in `source_languages` order.
    pub fn translate_cells(
        &self,
        row: usize,
        cells: &[Option<&Sentence>],
        width: usize,
        max_len: usize,
    ) -> Result<Sentence> {
        let sources = prepare_inputs(row, cells, &self.source_vocabs)?;
        let ids = match &self.model {
            Model::One2One(m) => m.translate(&sources[0], width, max_len)?,
            Model::MultiEncoder(m) => m.translate(&sources, width, max_len)?,
            Model::Moe(e) => e.translate(&sources, width, max_len)?,
        };
        Ok(self.target_vocab.decode(&ids))
    }

    /// Translates every row of `corpus`. Rows whose sources are all missing
    /// yield an empty sentence and are listed in the second return value.
    pub fn translate_corpus(
        &self,
        corpus: &MultiCorpus,
        width: usize,
        max_len: usize,
    ) -> Result<(Vec<Sentence>, Vec<usize>)> {
        let cols = self
            .source_languages
            .iter()
            .map(|l| corpus.column(l))
            .collect::<Result<Vec<_>>>()?;
        let rows = corpus.rows();
        let threads = thread::available_parallelism()
            .map_or(1, |n| n.get())
            .min(rows.len().max(1));
        let chunk = rows.len().div_ceil(threads).max(1);
        let parts: Vec<Result<Vec<Option<Sentence>>>> = thread::scope(|s| {
            let handles: Vec<_> = (0..rows.len())
                .step_by(chunk)
                .map(|start| {
                    let cols = &cols;
                    s.spawn(move || {
                        (start..(start + chunk).min(rows.len()))
                            .map(|r| {
                                let cells: Vec<Option<&Sentence>> =
                                    cols.iter().map(|&c| rows[r][c].as_ref()).collect();
                                match self.translate_cells(r, &cells, width, max_len) {
                                    Ok(t) => Ok(Some(t)),
                                    Err(Error::RejectedRow { .. }) => Ok(None),
                                    Err(e) => Err(e),
                                }
                            })
                            .collect()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("translation thread panicked"))
                .collect()
        });
        let mut out = Vec::with_capacity(rows.len());
        let mut rejected = Vec::new();
        for part in parts {
            for t in part? {
                match t {
                    Some(t) => out.push(t),
                    None => {
                        rejected.push(out.len());
                        out.push(Vec::new());
                    }
                }
            }
        }
        Ok((out, rejected))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;

    fn vocab(words: &[&str]) -> Vocabulary {
        Vocabulary::new(words.iter().copied())
    }

    fn one2one(lang: &str, seed: u64) -> Translator {
        let sv = vocab(&["a", "b"]);
        let tv = vocab(&["x", "y", "z"]);
        Translator {
            source_languages: vec![lang.into()],
            target_language: "t".into(),
            model: Model::One2One(
                Seq2Seq::new(Hyper::small(3, 2), sv.len(), tv.len(), seed).unwrap(),
            ),
            source_vocabs: vec![sv],
            target_vocab: tv,
        }
    }

    fn cells<'a>(s: &'a [Option<Sentence>]) -> Vec<Option<&'a Sentence>> {
        s.iter().map(Option::as_ref).collect()
    }

    #[test]
    fn one2one_roundtrip_translates_identically() {
        let dir = tempfile::tempdir().unwrap();
        let t = one2one("a", 4);
        let p = dir.path().join("m.ckpt");
        t.save(&p).unwrap();
        assert!(fs::read_to_string(&p).unwrap().starts_with("NSNMT1\n"));
        let back = Translator::load(&p).unwrap();
        let row = vec![tokenize("a b a")];
        assert_eq!(
            t.translate_cells(0, &cells(&row), 3, 6).unwrap(),
            back.translate_cells(0, &cells(&row), 3, 6).unwrap()
        );
        for ((n1, x), (n2, y)) in match (&t.model, &back.model) {
            (Model::One2One(a), Model::One2One(b)) => a.params.iter().zip(b.params.iter()),
            _ => unreachable!(),
        } {
            assert_eq!(n1, n2);
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn multiencoder_checkpoint_embeds_languages() {
        let vs = vec![vocab(&["a"]), vocab(&["b"]), vocab(&["c"])];
        let tv = vocab(&["x"]);
        let sizes: Vec<usize> = vs.iter().map(Vocabulary::len).collect();
        let t = Translator {
            source_languages: vec!["es".into(), "fr".into(), "ar".into()],
            target_language: "en".into(),
            model: Model::MultiEncoder(
                MultiEncoderModel::new(Hyper::small(2, 2), &sizes, tv.len(), 1).unwrap(),
            ),
            source_vocabs: vs,
            target_vocab: tv,
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        t.save(&p).unwrap();
        let ck = Checkpoint::load(&p).unwrap();
        assert_eq!(ck.kind, CheckpointKind::MultiEncoder);
        assert_eq!(ck.source_languages, ["es", "fr", "ar"]);
        let back = Translator::load(&p).unwrap();
        let row = vec![None, tokenize("b"), None];
        assert_eq!(
            t.translate_cells(0, &cells(&row), 2, 5).unwrap(),
            back.translate_cells(0, &cells(&row), 2, 5).unwrap()
        );
    }

    #[test]
    fn moe_manifest_roundtrip() {
        let experts = vec![one2one("a", 1), one2one("b", 2)];
        let models = experts
            .iter()
            .map(|e| match &e.model {
                Model::One2One(m) => m.clone(),
                _ => unreachable!(),
            })
            .collect();
        let t = Translator {
            source_languages: vec!["a".into(), "b".into()],
            target_language: "t".into(),
            source_vocabs: experts.iter().map(|e| e.source_vocabs[0].clone()).collect(),
            target_vocab: experts[0].target_vocab.clone(),
            model: Model::Moe(MoeEnsemble::new(models, 4, GateInput::DecoderInput, 3).unwrap()),
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("moe.json");
        t.save(&p).unwrap();
        assert!(dir.path().join("moe.json.expert.a.ckpt").exists());
        let back = Translator::load(&p).unwrap();
        assert_eq!(back.kind(), "moe");
        let row = vec![tokenize("a"), None];
        assert_eq!(
            t.translate_cells(0, &cells(&row), 2, 5).unwrap(),
            back.translate_cells(0, &cells(&row), 2, 5).unwrap()
        );
    }

    #[test]
    fn rejects_foreign_files() {
        assert!(matches!(
            Checkpoint::parse("hello\n{}"),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            Checkpoint::parse("NSNMT1\n{"),
            Err(Error::Format(_))
        ));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.json");
        fs::write(&p, r#"{"format":"other","experts":[],"gating":"g"}"#).unwrap();
        assert!(matches!(Translator::load(&p), Err(Error::Format(_))));
    }

    #[test]
    fn corpus_translation_flags_empty_rows() {
        let t = one2one("a", 2);
        let c = MultiCorpus::from_lines(&["a", "t"], &[vec!["a b", "", "b"], vec!["x", "y", "z"]])
            .unwrap();
        let (out, rejected) = t.translate_corpus(&c, 1, 4).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(rejected, [1]);
        assert!(out[1].is_empty());
    }
}
