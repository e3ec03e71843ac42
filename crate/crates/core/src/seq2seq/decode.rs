use std::cmp::Ordering;

use crate::corpus::{BOS, EOS, NULL, PAD};
use crate::error::{Error, Result};

/// Tokens never emitted by the decoders.
pub const BANNED_OUTPUTS: [usize; 3] = [PAD, BOS, NULL];

/// Incremental next-token distributions over a fixed source.
pub trait Stepper {
    type State: Clone;

    fn initial(&mut self) -> Result<Self::State>;

    /// Probability vector over the target vocabulary after `y_prev`.
    fn step(&mut self, state: &Self::State, y_prev: usize) -> Result<(Vec<f64>, Self::State)>;
}

fn allowed(tok: usize) -> bool {
    !BANNED_OUTPUTS.contains(&tok)
}

/// Argmax decoding from BOS until EOS or `max_len` tokens. Ties go to the
/// lower token id. EOS is not included in the output.
pub fn greedy_decode<S: Stepper>(s: &mut S, max_len: usize) -> Result<Vec<usize>> {
    if max_len == 0 {
        return Err(Error::Contract("max_len must be at least 1".into()));
    }
    let mut state = s.initial()?;
    let mut prev = BOS;
    let mut out = Vec::new();
    for _ in 0..max_len {
        let (dist, next) = s.step(&state, prev)?;
        let best = dist
            .iter()
            .enumerate()
            .filter(|(t, _)| allowed(*t))
            .fold(None, |best: Option<(usize, f64)>, (t, &p)| match best {
                Some((_, bp)) if bp >= p => best,
                _ => Some((t, p)),
            })
            .map(|(t, _)| t)
            .ok_or_else(|| Error::Contract("empty target vocabulary".into()))?;
        if best == EOS {
            break;
        }
        out.push(best);
        prev = best;
        state = next;
    }
    Ok(out)
}

struct Hyp<St> {
    score: f64,
    tokens: Vec<usize>,
    state: St,
}

struct Finished {
    score: f64,
    step: usize,
    tokens: Vec<usize>,
}

fn better(a_score: f64, a_tokens: &[usize], b_score: f64, b_tokens: &[usize]) -> Ordering {
    b_score
        .total_cmp(&a_score)
        .then_with(|| a_tokens.cmp(b_tokens))
}

/// Beam search over summed log-probabilities with no length normalization.
///
/// Hypotheses that emit EOS leave the beam. Among finished hypotheses the
/// highest score wins; ties go to the one finished earlier, then to the
/// lexicographically smaller token sequence. Hypotheses still alive after
/// `max_len` steps finish without EOS.
pub fn beam_decode<S: Stepper>(s: &mut S, width: usize, max_len: usize) -> Result<Vec<usize>> {
    if width == 0 {
        return Err(Error::Contract("beam width must be at least 1".into()));
    }
    if max_len == 0 {
        return Err(Error::Contract("max_len must be at least 1".into()));
    }
    let mut live = vec![Hyp {
        score: 0.0,
        tokens: Vec::new(),
        state: s.initial()?,
    }];
    let mut finished: Vec<Finished> = Vec::new();

    for step in 0..max_len {
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        let mut next_states = Vec::with_capacity(live.len());
        for (hi, hyp) in live.iter().enumerate() {
            let prev = hyp.tokens.last().copied().unwrap_or(BOS);
            let (dist, next) = s.step(&hyp.state, prev)?;
            for (tok, p) in dist.iter().enumerate() {
                if allowed(tok) {
                    candidates.push((hyp.score + p.ln(), hi, tok));
                }
            }
            next_states.push(next);
        }
        let seq = |c: &(f64, usize, usize)| {
            let mut t = live[c.1].tokens.clone();
            t.push(c.2);
            t
        };
        candidates.sort_by(|a, b| better(a.0, &seq(a), b.0, &seq(b)));
        candidates.truncate(width);

        let mut next_live = Vec::new();
        for c in &candidates {
            let (score, hi, tok) = *c;
            if tok == EOS {
                finished.push(Finished {
                    score,
                    step,
                    tokens: live[hi].tokens.clone(),
                });
            } else {
                next_live.push(Hyp {
                    score,
                    tokens: seq(c),
                    state: next_states[hi].clone(),
                });
            }
        }
        live = next_live;
        if live.is_empty() {
            break;
        }
        let best_live = live
            .iter()
            .map(|h| h.score)
            .fold(f64::NEG_INFINITY, f64::max);
        let best_done = finished
            .iter()
            .map(|f| f.score)
            .fold(f64::NEG_INFINITY, f64::max);
        if !finished.is_empty() && best_done >= best_live {
            break;
        }
    }
    finished.extend(live.into_iter().map(|h| Finished {
        score: h.score,
        step: max_len,
        tokens: h.tokens,
    }));
    finished
        .into_iter()
        .min_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then(a.step.cmp(&b.step))
                .then_with(|| a.tokens.cmp(&b.tokens))
        })
        .map(|f| f.tokens)
        .ok_or_else(|| Error::Contract("beam search produced no hypothesis".into()))
}
