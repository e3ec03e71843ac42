//! Corpus BLEU, sentence BLEU+1, paired bootstrap resampling and the
//! complete/incomplete breakdown report.
//!
//! All scoring is on whitespace tokens with a single reference.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{MultiCorpus, Sentence};
use crate::error::{Error, Result};

pub use crate::trainer::log_perplexity;

pub const MAX_ORDER: usize = 4;
/// Significance threshold used for star markers.
pub const SIGNIFICANCE_LEVEL: f64 = 0.01;

/// Additive BLEU sufficient statistics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BleuStats {
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl std::ops::AddAssign for BleuStats {
    fn add_assign(&mut self, o: BleuStats) {
        for n in 0..MAX_ORDER {
            self.matches[n] += o.matches[n];
            self.totals[n] += o.totals[n];
        }
        self.hyp_len += o.hyp_len;
        self.ref_len += o.ref_len;
    }
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts
                .entry(w.iter().map(AsRef::as_ref).collect())
                .or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches and totals of one sentence pair.
pub fn sentence_stats<S: AsRef<str>, T: AsRef<str>>(hyp: &[S], reference: &[T]) -> BleuStats {
    let mut s = BleuStats {
        hyp_len: hyp.len(),
        ref_len: reference.len(),
        ..BleuStats::default()
    };
    for n in 1..=MAX_ORDER {
        let h = ngram_counts(hyp, n);
        let r = ngram_counts(reference, n);
        s.totals[n - 1] = hyp.len().saturating_sub(n - 1);
        s.matches[n - 1] = h
            .iter()
            .map(|(g, c)| (*c).min(r.get(g).copied().unwrap_or(0)))
            .sum();
    }
    s
}

/// `exp(1 - r/h)` when the hypothesis is shorter, else 1.
pub fn brevity_penalty(hyp_len: usize, ref_len: usize) -> f64 {
    if hyp_len == 0 {
        0.0
    } else if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    /// 0 to 100.
    pub score: f64,
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuReport {
    pub fn from_stats(s: &BleuStats) -> Self {
        let mut precisions = [0.0; MAX_ORDER];
        for n in 0..MAX_ORDER {
            if s.totals[n] > 0 {
                precisions[n] = s.matches[n] as f64 / s.totals[n] as f64;
            }
        }
        let bp = brevity_penalty(s.hyp_len, s.ref_len);
        let score = if precisions.contains(&0.0) {
            0.0
        } else {
            let mean_log = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
            100.0 * bp * mean_log.exp()
        };
        BleuReport {
            score,
            precisions,
            brevity_penalty: bp,
            hyp_len: s.hyp_len,
            ref_len: s.ref_len,
        }
    }
}

fn check_aligned(what: &str, a: usize, refs: usize) -> Result<()> {
    if a != refs {
        return Err(Error::Alignment(format!(
            "{what} has {a} sentences but there are {refs} references"
        )));
    }
    Ok(())
}

pub fn corpus_stats<S: AsRef<str>, T: AsRef<str>>(
    hyps: &[Vec<S>],
    refs: &[Vec<T>],
) -> Result<Vec<BleuStats>> {
    check_aligned("hypothesis set", hyps.len(), refs.len())?;
    Ok(hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| sentence_stats(h, r))
        .collect())
}

/// Corpus-level BLEU-4 with clipped counts and brevity penalty.
pub fn corpus_bleu<S: AsRef<str>, T: AsRef<str>>(
    hyps: &[Vec<S>],
    refs: &[Vec<T>],
) -> Result<BleuReport> {
    let mut total = BleuStats::default();
    for s in corpus_stats(hyps, refs)? {
        total += s;
    }
    Ok(BleuReport::from_stats(&total))
}

/// Sentence BLEU on the 0 to 1 scale with add-one smoothing of the 2- to
/// 4-gram counts; unigrams are unsmoothed.
pub fn sentence_bleu_plus1<S: AsRef<str>, T: AsRef<str>>(
    hyp: &[S],
    reference: &[T],
) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Contract("BLEU+1 needs a non-empty reference".into()));
    }
    if hyp.is_empty() {
        return Ok(0.0);
    }
    let s = sentence_stats(hyp, reference);
    let mut log_sum = 0.0;
    for n in 0..MAX_ORDER {
        let p = if n == 0 {
            s.matches[0] as f64 / s.totals[0] as f64
        } else {
            (s.matches[n] + 1) as f64 / (s.totals[n] + 1) as f64
        };
        if p == 0.0 {
            return Ok(0.0);
        }
        log_sum += p.ln();
    }
    Ok(brevity_penalty(s.hyp_len, s.ref_len) * (log_sum / MAX_ORDER as f64).exp())
}

/// Paired bootstrap resampling. Returns the fraction of resamples in which
/// system A does not beat system B (ties count against A).
pub fn paired_bootstrap<S: AsRef<str>, T: AsRef<str>, U: AsRef<str>>(
    hyps_a: &[Vec<S>],
    hyps_b: &[Vec<T>],
    refs: &[Vec<U>],
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let a = corpus_stats(hyps_a, refs)?;
    let b = corpus_stats(hyps_b, refs)?;
    bootstrap_stats(&a, &b, samples, seed)
}

/// [`paired_bootstrap`] over precomputed per-sentence statistics.
pub fn bootstrap_stats(a: &[BleuStats], b: &[BleuStats], samples: usize, seed: u64) -> Result<f64> {
    if samples < 100 {
        return Err(Error::Contract(format!(
            "bootstrap needs at least 100 samples, got {samples}"
        )));
    }
    check_aligned("system B", b.len(), a.len())?;
    if a.is_empty() {
        return Err(Error::Contract("bootstrap over an empty test set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut not_better = 0usize;
    for _ in 0..samples {
        let (mut sa, mut sb) = (BleuStats::default(), BleuStats::default());
        for _ in 0..a.len() {
            let i = rng.gen_range(0..a.len());
            sa += a[i];
            sb += b[i];
        }
        if BleuReport::from_stats(&sa).score <= BleuReport::from_stats(&sb).score {
            not_better += 1;
        }
    }
    Ok(not_better as f64 / samples as f64)
}

pub fn significance_marker(p: f64) -> &'static str {
    if p < SIGNIFICANCE_LEVEL {
        "*"
    } else {
        ""
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemBreakdown {
    pub system: String,
    /// Absent when the partition is empty.
    pub complete: Option<BleuReport>,
    pub incomplete: Option<BleuReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakdownReport {
    pub complete_rows: usize,
    pub incomplete_rows: usize,
    pub systems: Vec<SystemBreakdown>,
}

/// Target sentences of `test`; every row must have one.
pub fn references(test: &MultiCorpus, target: &str) -> Result<Vec<Sentence>> {
    let c = test.column(target)?;
    test.rows()
        .iter()
        .enumerate()
        .map(|(i, r)| {
            r[c].clone().ok_or_else(|| {
                Error::Format(format!("test row {} has no `{target}` reference", i + 1))
            })
        })
        .collect()
}

/// Splits test rows by whether every source is present and scores each
/// system on both parts.
pub fn breakdown(
    test: &MultiCorpus,
    sources: &[String],
    target: &str,
    systems: &[(String, Vec<Sentence>)],
) -> Result<BreakdownReport> {
    let refs = references(test, target)?;
    let complete: Vec<bool> = (0..test.len())
        .map(|r| test.is_complete(r, sources))
        .collect::<Result<_>>()?;
    let n_complete = complete.iter().filter(|&&c| c).count();
    let mut out = Vec::with_capacity(systems.len());
    for (name, hyps) in systems {
        check_aligned(&format!("system `{name}`"), hyps.len(), refs.len())?;
        let score = |want: bool| -> Result<Option<BleuReport>> {
            let idx: Vec<usize> = (0..refs.len()).filter(|&i| complete[i] == want).collect();
            if idx.is_empty() {
                return Ok(None);
            }
            let h: Vec<&Sentence> = idx.iter().map(|&i| &hyps[i]).collect();
            let r: Vec<&Sentence> = idx.iter().map(|&i| &refs[i]).collect();
            let h: Vec<Vec<&str>> = h
                .iter()
                .map(|s| s.iter().map(String::as_str).collect())
                .collect();
            let r: Vec<Vec<&str>> = r
                .iter()
                .map(|s| s.iter().map(String::as_str).collect())
                .collect();
            corpus_bleu(&h, &r).map(Some)
        };
        out.push(SystemBreakdown {
            system: name.clone(),
            complete: score(true)?,
            incomplete: score(false)?,
        });
    }
    Ok(BreakdownReport {
        complete_rows: n_complete,
        incomplete_rows: refs.len() - n_complete,
        systems: out,
    })
}

/// Whether a system is a one-to-one baseline or uses several sources.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    Baseline,
    MultiSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemScore {
    pub system: String,
    pub kind: SystemKind,
    pub bleu: BleuReport,
    /// Gain over the best baseline, for multi-source systems.
    pub gain: Option<f64>,
    /// Bootstrap p-value against the best baseline, for multi-source systems.
    pub p_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub best_baseline: Option<String>,
    pub systems: Vec<SystemScore>,
    pub breakdown: BreakdownReport,
}

/// A named system output for [`build_report`].
#[derive(Debug, Clone)]
pub struct SystemOutput {
    pub name: String,
    pub kind: SystemKind,
    pub hypotheses: Vec<Sentence>,
}

/// Scores every system, compares multi-source systems against the best
/// baseline with paired bootstrap and adds the breakdown.
pub fn build_report(
    test: &MultiCorpus,
    sources: &[String],
    target: &str,
    systems: &[SystemOutput],
    samples: usize,
    seed: u64,
) -> Result<Report> {
    let refs = references(test, target)?;
    let stats = systems
        .iter()
        .map(|s| corpus_stats(&s.hypotheses, &refs))
        .collect::<Result<Vec<_>>>()?;
    let reports: Vec<BleuReport> = stats
        .iter()
        .map(|st| {
            let mut total = BleuStats::default();
            for s in st {
                total += *s;
            }
            BleuReport::from_stats(&total)
        })
        .collect();
    let best = (0..systems.len())
        .filter(|&i| systems[i].kind == SystemKind::Baseline)
        .fold(None, |best: Option<usize>, i| match best {
            Some(b) if reports[b].score >= reports[i].score => Some(b),
            _ => Some(i),
        });
    let mut scores = Vec::with_capacity(systems.len());
    for (i, s) in systems.iter().enumerate() {
        let (gain, p_value) = match (s.kind, best) {
            (SystemKind::MultiSource, Some(b)) => (
                Some(reports[i].score - reports[b].score),
                Some(bootstrap_stats(&stats[i], &stats[b], samples, seed)?),
            ),
            _ => (None, None),
        };
        scores.push(SystemScore {
            system: s.name.clone(),
            kind: s.kind,
            bleu: reports[i].clone(),
            gain,
            p_value,
        });
    }
    let pairs: Vec<(String, Vec<Sentence>)> = systems
        .iter()
        .map(|s| (s.name.clone(), s.hypotheses.clone()))
        .collect();
    Ok(Report {
        best_baseline: best.map(|b| systems[b].name.clone()),
        systems: scores,
        breakdown: breakdown(test, sources, target, &pairs)?,
    })
}

fn fmt_bleu(r: &Option<BleuReport>) -> String {
    r.as_ref()
        .map_or_else(|| "-".to_string(), |r| format!("{:.2}", r.score))
}

impl Report {
    /// Plain-text BLEU table with gains and significance stars, followed by
    /// the complete/incomplete breakdown.
    pub fn render(&self) -> String {
        let width = self
            .systems
            .iter()
            .map(|s| s.system.len())
            .max()
            .unwrap_or(0)
            .max(6);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  BLEU", "system");
        for s in &self.systems {
            let mut line = format!("{:<width$}  {:.2}", s.system, s.bleu.score);
            if let Some(g) = s.gain {
                let _ = write!(line, " ({g:+.2})");
            }
            if let Some(p) = s.p_value {
                line.push_str(significance_marker(p));
            }
            let _ = writeln!(out, "{}", line.trim_end());
        }
        if let Some(b) = &self.best_baseline {
            let _ = writeln!(
                out,
                "gains against {b}; * marks p < {SIGNIFICANCE_LEVEL} by paired bootstrap"
            );
        }
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "{:<width$}  complete ({})  incomplete ({})",
            "system", self.breakdown.complete_rows, self.breakdown.incomplete_rows
        );
        let cw = format!("complete ({})", self.breakdown.complete_rows).len();
        for s in &self.breakdown.systems {
            let _ = writeln!(
                out,
                "{:<width$}  {:<cw$}  {}",
                s.system,
                fmt_bleu(&s.complete),
                fmt_bleu(&s.incomplete)
            );
        }
        out
    }
}
