//! Mixture of NMT experts.
//!
//! Independently trained one-to-one models share a target vocabulary. At
//! every step each expert advances on the same previous token and a gating
//! network turns the experts' decoder inputs into weights
//! `g_t = softmax(W_gate · tanh(W_hid · [f_t^1; …; f_t^m]))` that mix the
//! expert distributions: `p_t = Σ_j g_t^j · p_t^j`. Only the gating network
//! is trained; the experts stay frozen.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, Graph, ParamId, Params, Var};
use crate::corpus::{Sentence, Vocabulary};
use crate::error::{Error, Result};
use crate::multiencoder::{prepare_inputs, MultiExample};
use crate::seq2seq::{
    beam_decode, check_target, glorot, greedy_decode, rng_for, DecoderState, EncoderOutput,
    Seq2Seq, Stepper,
};
use crate::trainer::{train, TrainConfig, TrainOutcome, Trainable};

pub const DEFAULT_GATING_HIDDEN: usize = 256;

/// Which per-expert vector feeds the gating network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateInput {
    /// Embedding of the previous target token.
    Embedding,
    /// Embedding concatenated with the expert's attentional feed.
    #[default]
    DecoderInput,
}

#[derive(Debug, Clone)]
pub struct GatingNetwork {
    /// `hidden × Σ input widths`
    pub w_hid: ParamId,
    /// `m × hidden`
    pub w_gate: ParamId,
    pub input_widths: Vec<usize>,
    pub hidden: usize,
}

impl GatingNetwork {
    pub fn new(params: &mut Params, input_widths: Vec<usize>, hidden: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed);
        let total: usize = input_widths.iter().sum();
        GatingNetwork {
            w_hid: params.add("gate.hid.w", glorot(&[hidden, total], &mut rng)),
            w_gate: params.add(
                "gate.out.w",
                glorot(&[input_widths.len(), hidden], &mut rng),
            ),
            input_widths,
            hidden,
        }
    }

    pub fn experts(&self) -> usize {
        self.input_widths.len()
    }
}

/// Gate probabilities over the `m` experts.
pub fn gate_weights(
    g: &mut Graph,
    b: &mut Bound,
    gating: &GatingNetwork,
    inputs: &[Var],
) -> Result<Var> {
    let widths: Vec<usize> = inputs.iter().map(|v| g.width(*v)).collect();
    if widths != gating.input_widths {
        return Err(Error::Dimension(format!(
            "gating expects input widths {:?}, got {widths:?}",
            gating.input_widths
        )));
    }
    let joined = g.concat(inputs, 0)?;
    let w_hid = b.get(g, gating.w_hid);
    let hid = g.matmul(w_hid, joined)?;
    let hid = g.tanh(hid);
    let w_gate = b.get(g, gating.w_gate);
    let scores = g.matmul(w_gate, hid)?;
    Ok(g.softmax(scores))
}

/// `Σ_j gates[j] · dists[j]`.
pub fn mixture_distribution(g: &mut Graph, gates: Var, dists: &[Var]) -> Result<Var> {
    if dists.is_empty() || g.width(gates) != dists.len() {
        return Err(Error::Dimension(format!(
            "{} gate weights for {} expert distributions",
            g.width(gates),
            dists.len()
        )));
    }
    let v = g.width(dists[0]);
    if let Some(d) = dists.iter().find(|d| g.width(**d) != v) {
        return Err(Error::Dimension(format!(
            "expert vocabularies differ: {v} vs {}",
            g.width(*d)
        )));
    }
    let stacked = g.concat(dists, 0)?;
    let stacked = g.reshape(stacked, &[dists.len(), v])?;
    g.matmul(gates, stacked)
}

#[derive(Debug, Clone, Copy)]
pub struct MoeStep {
    pub dist: Var,
    pub gates: Var,
}

#[derive(Debug, Clone)]
pub struct MoeEnsemble {
    pub experts: Vec<Seq2Seq>,
    /// Gating parameters only.
    pub params: Params,
    pub gating: GatingNetwork,
    pub gate_input: GateInput,
}

impl MoeEnsemble {
    pub fn new(
        experts: Vec<Seq2Seq>,
        gating_hidden: usize,
        gate_input: GateInput,
        seed: u64,
    ) -> Result<Self> {
        if experts.len() < 2 {
            return Err(Error::Contract(format!(
                "a mixture needs at least two experts, got {}",
                experts.len()
            )));
        }
        if gating_hidden == 0 {
            return Err(Error::Contract(
                "gating hidden size must be positive".into(),
            ));
        }
        let v = experts[0].tgt_vocab();
        if let Some(e) = experts.iter().find(|e| e.tgt_vocab() != v) {
            return Err(Error::Dimension(format!(
                "experts must share the target vocabulary: {v} vs {}",
                e.tgt_vocab()
            )));
        }
        let widths = experts
            .iter()
            .map(|e| match gate_input {
                GateInput::Embedding => e.hyper.embed_dim,
                GateInput::DecoderInput => e.hyper.embed_dim + e.hyper.hidden_dim,
            })
            .collect();
        let mut params = Params::new();
        let gating = GatingNetwork::new(&mut params, widths, gating_hidden, seed);
        Ok(MoeEnsemble {
            experts,
            params,
            gating,
            gate_input,
        })
    }

    pub fn tgt_vocab(&self) -> usize {
        self.experts[0].tgt_vocab()
    }

    fn expert_bounds(&self) -> Vec<Bound<'_>> {
        self.experts
            .iter()
            .map(|e| Bound::frozen(&e.params))
            .collect()
    }

    fn encode_all(
        &self,
        g: &mut Graph,
        eb: &mut [Bound],
        sources: &[Vec<usize>],
    ) -> Result<Vec<EncoderOutput>> {
        if sources.len() != self.experts.len() {
            return Err(Error::Dimension(format!(
                "{} source sequences for {} experts",
                sources.len(),
                self.experts.len()
            )));
        }
        self.experts
            .iter()
            .zip(eb.iter_mut())
            .zip(sources)
            .map(|((e, b), s)| e.encode(g, b, s))
            .collect()
    }

    fn initial_states(&self, g: &mut Graph, encs: &[EncoderOutput]) -> Vec<DecoderState> {
        self.experts
            .iter()
            .zip(encs)
            .map(|(e, enc)| e.init_state(g, enc))
            .collect()
    }

    /// Advances every expert on `y_prev` and mixes their distributions.
    pub fn step(
        &self,
        g: &mut Graph,
        eb: &mut [Bound],
        gb: &mut Bound,
        states: &[DecoderState],
        y_prev: usize,
        encs: &[EncoderOutput],
    ) -> Result<(MoeStep, Vec<DecoderState>)> {
        let mut dists = Vec::with_capacity(self.experts.len());
        let mut feats = Vec::with_capacity(self.experts.len());
        let mut next = Vec::with_capacity(self.experts.len());
        for (j, e) in self.experts.iter().enumerate() {
            let out = e.decoder_step(g, &mut eb[j], &states[j], y_prev, &encs[j])?;
            dists.push(out.dist);
            feats.push(match self.gate_input {
                GateInput::Embedding => out.embedding,
                GateInput::DecoderInput => out.input,
            });
            next.push(out.state);
        }
        let gates = gate_weights(g, gb, &self.gating, &feats)?;
        let dist = mixture_distribution(g, gates, &dists)?;
        Ok((MoeStep { dist, gates }, next))
    }

    /// Teacher-forced NLL of the mixture; also returns each step's gates.
    pub fn sequence_loss(
        &self,
        g: &mut Graph,
        eb: &mut [Bound],
        gb: &mut Bound,
        sources: &[Vec<usize>],
        target: &[usize],
    ) -> Result<(Var, Vec<Var>)> {
        check_target(target)?;
        let encs = self.encode_all(g, eb, sources)?;
        let mut states = self.initial_states(g, &encs);
        let mut terms = Vec::with_capacity(target.len() - 1);
        let mut gates = Vec::with_capacity(target.len() - 1);
        for pair in target.windows(2) {
            let (out, next) = self.step(g, eb, gb, &states, pair[0], &encs)?;
            terms.push(g.cross_entropy(out.dist, pair[1])?);
            gates.push(out.gates);
            states = next;
        }
        Ok((g.sum_all(&terms)?, gates))
    }

    pub fn session(&self, sources: &[Vec<usize>]) -> Result<MoeSession<'_>> {
        let mut g = Graph::new();
        let mut eb = self.expert_bounds();
        let encs = self.encode_all(&mut g, &mut eb, sources)?;
        Ok(MoeSession {
            model: self,
            g,
            eb,
            gb: Bound::frozen(&self.params),
            encs,
        })
    }

    pub fn translate(
        &self,
        sources: &[Vec<usize>],
        width: usize,
        max_len: usize,
    ) -> Result<Vec<usize>> {
        let mut s = self.session(sources)?;
        if width <= 1 {
            greedy_decode(&mut s, max_len)
        } else {
            beam_decode(&mut s, width, max_len)
        }
    }

    /// Mean teacher-forced gate vector over every target step in `data`.
    pub fn mean_gate_weights(&self, data: &[MultiExample]) -> Result<Vec<f64>> {
        let mut sum = vec![0.0; self.experts.len()];
        let mut steps = 0usize;
        for ex in data {
            let mut g = Graph::new();
            let mut eb = self.expert_bounds();
            let mut gb = Bound::frozen(&self.params);
            let (_, gates) =
                self.sequence_loss(&mut g, &mut eb, &mut gb, &ex.sources, &ex.target)?;
            for v in gates {
                for (s, x) in sum.iter_mut().zip(g.value(v)) {
                    *s += x;
                }
                steps += 1;
            }
        }
        if steps == 0 {
            return Err(Error::Contract(
                "no target steps to average gates over".into(),
            ));
        }
        Ok(sum.into_iter().map(|s| s / steps as f64).collect())
    }
}

/// Prepares the row (missing sources become `<NULL>`) and decodes.
pub fn moe_translate(
    ensemble: &MoeEnsemble,
    vocabs: &[Vocabulary],
    row: usize,
    cells: &[Option<&Sentence>],
    width: usize,
    max_len: usize,
) -> Result<Vec<usize>> {
    let sources = prepare_inputs(row, cells, vocabs)?;
    ensemble.translate(&sources, width, max_len)
}

fn expert_fingerprint(experts: &[Seq2Seq]) -> Vec<Vec<u64>> {
    experts
        .iter()
        .flat_map(|e| {
            e.params
                .iter()
                .map(|(_, t)| t.data().iter().map(|x| x.to_bits()).collect())
        })
        .collect()
}

/// Trains the gating network with the experts frozen. Fails with a
/// contract error if any expert parameter changed.
pub fn train_gating<F>(
    ensemble: &mut MoeEnsemble,
    train_set: &[MultiExample],
    valid_set: &[MultiExample],
    config: &TrainConfig,
    on_checkpoint: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&MoeEnsemble, &crate::trainer::EpochRecord) -> Result<()>,
{
    let before = expert_fingerprint(&ensemble.experts);
    let outcome = train(ensemble, train_set, valid_set, config, on_checkpoint)?;
    if expert_fingerprint(&ensemble.experts) != before {
        return Err(Error::Contract(
            "expert parameters changed during gating training".into(),
        ));
    }
    Ok(outcome)
}

pub struct MoeSession<'m> {
    model: &'m MoeEnsemble,
    g: Graph,
    eb: Vec<Bound<'m>>,
    gb: Bound<'m>,
    encs: Vec<EncoderOutput>,
}

impl Stepper for MoeSession<'_> {
    type State = Vec<DecoderState>;

    fn initial(&mut self) -> Result<Vec<DecoderState>> {
        Ok(self.model.initial_states(&mut self.g, &self.encs))
    }

    fn step(
        &mut self,
        states: &Vec<DecoderState>,
        y_prev: usize,
    ) -> Result<(Vec<f64>, Vec<DecoderState>)> {
        let (out, next) = self.model.step(
            &mut self.g,
            &mut self.eb,
            &mut self.gb,
            states,
            y_prev,
            &self.encs,
        )?;
        Ok((self.g.value(out.dist).to_vec(), next))
    }
}

impl Trainable for MoeEnsemble {
    type Example = MultiExample;

    fn params(&self) -> &Params {
        &self.params
    }

    fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    fn accumulate_gradients(&mut self, ex: &MultiExample) -> Result<(f64, usize)> {
        let (grads, value) = {
            let mut g = Graph::new();
            let mut eb = self.expert_bounds();
            let mut gb = Bound::trainable(&self.params);
            let (loss, _) =
                self.sequence_loss(&mut g, &mut eb, &mut gb, &ex.sources, &ex.target)?;
            g.backward(loss)?;
            (gb.gradients(&g), g.scalar(loss))
        };
        self.params.accumulate(grads);
        Ok((value, ex.target.len() - 1))
    }

    fn example_nll(&self, ex: &MultiExample) -> Result<(f64, usize)> {
        let mut g = Graph::new();
        let mut eb = self.expert_bounds();
        let mut gb = Bound::frozen(&self.params);
        let (loss, _) = self.sequence_loss(&mut g, &mut eb, &mut gb, &ex.sources, &ex.target)?;
        Ok((g.scalar(loss), ex.target.len() - 1))
    }
}
